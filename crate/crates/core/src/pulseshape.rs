//! Pulse waveforms and the two-level transfer maps they induce.
//!
//! Rabi amplitudes and detunings are in Hz; the integrators work in angular
//! units internally. Every [`TransferMap`] is referenced to the pulse centre:
//! free evolution over the half-support on either side is divided out, so a
//! pulse can be applied as an instantaneous map at `center_time`.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::physmodel::Transition;
use crate::profile::{ProfileError, SpectralProfile};

/// Pulses are truncated at this many characteristic widths from the centre
/// (sigma for a Gaussian, 1/beta for a hyperbolic secant).
pub const TRUNCATION_WIDTHS: f64 = 5.0;

/// Relative tolerance of the adaptive propagator.
pub const PROPAGATION_TOLERANCE: f64 = 1e-8;

/// Target phase advance per step when choosing the initial step count.
const STEP_PHASE: f64 = 0.05;
const MAX_STEPS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseRole {
    Signal,
    Control,
    Pump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PulseShape {
    /// Amplitude FWHM `fwhm`; peak set by the nominal area.
    Gaussian { fwhm: f64 },
    /// `peak_rabi * sech(beta t)^(1 + i chirp_mu)`; `beta` in s^-1.
    Sech { peak_rabi: f64, beta: f64, chirp_mu: f64 },
    /// Constant amplitude with a linear sweep of `sweep_width` Hz; a zero
    /// sweep gives a square pulse.
    Chirp { sweep_width: f64, duration: f64 },
    /// Instantaneous resonant rotation by the nominal area, occupying
    /// `duration` for scheduling purposes.
    Ideal { duration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    pub transition: Transition,
    pub center_time: f64,
    pub shape: PulseShape,
    /// Pulse area in radians (defines the Gaussian, chirp and ideal amplitudes).
    pub nominal_area: f64,
    pub phase: f64,
    /// Unit propagation direction in the (x, y) plane.
    pub direction: [f64; 2],
    pub role: PulseRole,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PulseError {
    #[error("pulse width or duration must be strictly positive")]
    NonPositiveWidth,
    #[error("pulse direction not normalized (|k| = {0})")]
    UnnormalizedDirection(f64),
    #[error("integration did not converge within {0} steps")]
    IntegrationFailure(usize),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

impl PulseSpec {
    pub fn validate(&self) -> Result<(), PulseError> {
        let positive = match self.shape {
            PulseShape::Gaussian { fwhm } => fwhm > 0.0,
            PulseShape::Sech { beta, .. } => beta > 0.0,
            PulseShape::Chirp { duration, .. } | PulseShape::Ideal { duration } => duration > 0.0,
        };
        if !positive {
            return Err(PulseError::NonPositiveWidth);
        }
        let norm = self.direction[0].hypot(self.direction[1]);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(PulseError::UnnormalizedDirection(norm));
        }
        Ok(())
    }

    /// Half-width of the truncated support, s.
    pub fn half_support(&self) -> f64 {
        match self.shape {
            PulseShape::Gaussian { fwhm } => TRUNCATION_WIDTHS * fwhm / (2.0 * (2.0 * LN_2).sqrt()),
            PulseShape::Sech { beta, .. } => TRUNCATION_WIDTHS / beta,
            PulseShape::Chirp { duration, .. } | PulseShape::Ideal { duration } => 0.5 * duration,
        }
    }

    /// `[start, end]` of the truncated support.
    pub fn support(&self) -> (f64, f64) {
        let h = self.half_support();
        (self.center_time - h, self.center_time + h)
    }

    /// Peak |Rabi frequency| in Hz.
    pub fn peak_rabi(&self) -> f64 {
        match self.shape {
            PulseShape::Gaussian { fwhm } => {
                // area = 2 pi Omega0 * fwhm * sqrt(pi / (4 ln 2))
                self.nominal_area / (2.0 * PI * fwhm * (PI / (4.0 * LN_2)).sqrt())
            }
            PulseShape::Sech { peak_rabi, .. } => peak_rabi,
            PulseShape::Chirp { duration, .. } | PulseShape::Ideal { duration } => {
                self.nominal_area / (2.0 * PI * duration)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.peak_rabi() == 0.0
    }
}

/// Complex Rabi amplitude (Hz) at time `t`, carrying the pulse phase and any
/// chirp. Identically zero outside the truncated support.
pub fn envelope(spec: &PulseSpec, t: f64) -> Complex64 {
    let tau = t - spec.center_time;
    if !(tau.abs() <= spec.half_support()) {
        return Complex64::new(0.0, 0.0);
    }
    let peak = spec.peak_rabi();
    let (magnitude, chirp_phase) = match spec.shape {
        PulseShape::Gaussian { fwhm } => (peak * (-4.0 * LN_2 * tau * tau / (fwhm * fwhm)).exp(), 0.0),
        PulseShape::Sech { beta, chirp_mu, .. } => {
            let x = beta * tau;
            let sech = 1.0 / x.cosh();
            // d/dt of mu ln sech(beta t) = -mu beta tanh(beta t)
            (peak * sech, chirp_mu * sech.ln())
        }
        PulseShape::Chirp { sweep_width, duration } => (peak, PI * sweep_width * tau * tau / duration),
        PulseShape::Ideal { .. } => (peak, 0.0),
    };
    Complex64::from_polar(magnitude, spec.phase + chirp_phase)
}

/// Instantaneous frequency offset of the drive, Hz.
pub fn instantaneous_detuning(spec: &PulseSpec, t: f64) -> f64 {
    let tau = t - spec.center_time;
    match spec.shape {
        PulseShape::Sech { beta, chirp_mu, .. } => -chirp_mu * beta * (beta * tau).tanh() / (2.0 * PI),
        PulseShape::Chirp { sweep_width, duration } => sweep_width * tau / duration,
        _ => 0.0,
    }
}

/// 2x2 propagator on (lower, upper) amplitudes of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMap(pub [[Complex64; 2]; 2]);

impl TransferMap {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        TransferMap([[one, zero], [zero, one]])
    }

    /// Resonant rotation by `area` with drive phase `phase`; maps (1, 0) to
    /// (cos(area/2), -i e^{i phase} sin(area/2)).
    pub fn rotation(area: f64, phase: f64) -> Self {
        let c = Complex64::new((0.5 * area).cos(), 0.0);
        let s = (0.5 * area).sin();
        let minus_i = Complex64::new(0.0, -1.0);
        TransferMap([[c, minus_i * Complex64::from_polar(s, -phase)], [minus_i * Complex64::from_polar(s, phase), c]])
    }

    pub fn matmul(&self, rhs: &TransferMap) -> TransferMap {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        TransferMap(out)
    }

    pub fn adjoint(&self) -> TransferMap {
        let a = &self.0;
        TransferMap([[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]])
    }

    pub fn apply(&self, amplitudes: [Complex64; 2]) -> [Complex64; 2] {
        let a = &self.0;
        [a[0][0] * amplitudes[0] + a[0][1] * amplitudes[1], a[1][0] * amplitudes[0] + a[1][1] * amplitudes[1]]
    }

    /// Probability of lower -> upper transfer.
    pub fn transfer_probability(&self) -> f64 {
        self.0[1][0].norm_sqr()
    }

    /// Largest entry of |U^dagger U - I|.
    pub fn unitarity_error(&self) -> f64 {
        let p = self.adjoint().matmul(self);
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.0[i][j] - target).norm());
            }
        }
        worst
    }

    pub fn max_difference(&self, other: &TransferMap) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).norm());
            }
        }
        worst
    }

    fn half_free(detuning_rad: f64, tau: f64) -> TransferMap {
        // exp(-i H0 tau) with H0 = diag(-D/2, D/2), evaluated at -tau
        let z = Complex64::new(0.0, 0.0);
        TransferMap([
            [Complex64::from_polar(1.0, -0.5 * detuning_rad * tau), z],
            [z, Complex64::from_polar(1.0, 0.5 * detuning_rad * tau)],
        ])
    }
}

fn su2_exp(k: [f64; 3]) -> TransferMap {
    // exp(-i k . sigma)
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let (c, sinc) = if norm < 1e-300 { (1.0, 1.0) } else { (norm.cos(), norm.sin() / norm) };
    let (x, y, z) = (k[0] * sinc, k[1] * sinc, k[2] * sinc);
    TransferMap([[Complex64::new(c, -z), Complex64::new(-y, -x)], [Complex64::new(y, -x), Complex64::new(c, z)]])
}

#[derive(Debug, Clone)]
enum Kernel {
    Identity,
    Rotation(TransferMap),
    /// Transverse Bloch components (angular) at the two Gauss nodes of each step.
    Magnus {
        nodes: Vec<[[f64; 2]; 2]>,
        step: f64,
        half_span: f64,
    },
}

/// Fourth-order Magnus propagator with the drive sampled once, so maps at
/// many detunings reuse the same envelope evaluations.
#[derive(Debug, Clone)]
pub struct Propagator {
    kernel: Kernel,
}

impl Propagator {
    pub fn new(spec: &PulseSpec, steps: usize) -> Self {
        if let PulseShape::Ideal { .. } = spec.shape {
            return Propagator { kernel: Kernel::Rotation(TransferMap::rotation(spec.nominal_area, spec.phase)) };
        }
        if spec.is_zero() {
            return Propagator { kernel: Kernel::Identity };
        }
        let steps = steps.max(1);
        let (start, end) = spec.support();
        let h = (end - start) / steps as f64;
        let offset = h * 3f64.sqrt() / 6.0;
        let sample = |t: f64| {
            let omega = envelope(spec, t) * (2.0 * PI);
            [0.5 * omega.re, 0.5 * omega.im]
        };
        let nodes = (0..steps)
            .map(|n| {
                let mid = start + (n as f64 + 0.5) * h;
                [sample(mid - offset), sample(mid + offset)]
            })
            .collect();
        Propagator { kernel: Kernel::Magnus { nodes, step: h, half_span: 0.5 * (end - start) } }
    }

    /// Centre-referenced map at `detuning` Hz.
    pub fn map(&self, detuning: f64) -> TransferMap {
        match &self.kernel {
            Kernel::Identity => TransferMap::identity(),
            Kernel::Rotation(u) => *u,
            Kernel::Magnus { nodes, step, half_span } => {
                let h = *step;
                let hz = -0.5 * 2.0 * PI * detuning;
                let w = 3f64.sqrt() / 6.0 * h * h;
                let mut u = TransferMap::identity();
                for [a, b] in nodes {
                    // commutator term (h2 x h1) with h = (x, y, hz) at both nodes
                    let c = [b[1] * hz - hz * a[1], hz * a[0] - b[0] * hz, b[0] * a[1] - b[1] * a[0]];
                    let k = [0.5 * h * (a[0] + b[0]) + w * c[0], 0.5 * h * (a[1] + b[1]) + w * c[1], h * hz + w * c[2]];
                    u = su2_exp(k).matmul(&u);
                }
                let d = TransferMap::half_free(2.0 * PI * detuning, *half_span);
                d.matmul(&u).matmul(&d)
            }
        }
    }
}

/// Detuning samples per unit of inverse support when tabulating maps.
pub const TABLE_DENSITY: f64 = 128.0;

impl Propagator {
    /// True for numerically integrated pulses, where tabulation pays off.
    pub fn is_numeric(&self) -> bool {
        matches!(self.kernel, Kernel::Magnus { .. })
    }

    /// Tabulates the map over `[lo, hi]` Hz at spacing `step`.
    pub fn tabulate(&self, lo: f64, hi: f64, step: f64) -> MapTable {
        let start = lo - 2.0 * step;
        let count = ((hi - lo) / step).ceil().max(0.0) as usize + 5;
        let (a, b) = (0..count)
            .map(|i| {
                let m = self.map(start + i as f64 * step);
                (m.0[0][0], m.0[1][0])
            })
            .unzip();
        MapTable { start, step, a, b }
    }

    /// Default table spacing for this pulse, Hz.
    pub fn table_step(spec: &PulseSpec) -> f64 {
        1.0 / (TABLE_DENSITY * 2.0 * spec.half_support())
    }
}

/// SU(2) maps on a uniform detuning grid, interpolated with four-point
/// Lagrange cubics and renormalized so every returned map is unitary.
#[derive(Debug, Clone)]
pub struct MapTable {
    start: f64,
    step: f64,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
}

impl MapTable {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn map(&self, detuning: f64) -> TransferMap {
        let x = (detuning - self.start) / self.step;
        let i = (x.floor() as isize).clamp(1, self.a.len() as isize - 3) as usize;
        let t = x - i as f64;
        let w = [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ];
        let mut a = Complex64::new(0.0, 0.0);
        let mut b = Complex64::new(0.0, 0.0);
        for (k, wk) in w.iter().enumerate() {
            a += self.a[i - 1 + k] * *wk;
            b += self.b[i - 1 + k] * *wk;
        }
        let norm = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (a, b) = (a / norm, b / norm);
        TransferMap([[a, -b.conj()], [b, a.conj()]])
    }
}

/// Fourth-order Magnus integration with a fixed number of steps over the
/// pulse support, returned as a centre-referenced map.
pub fn propagate_fixed(spec: &PulseSpec, detuning: f64, steps: usize) -> TransferMap {
    Propagator::new(spec, steps).map(detuning)
}

/// Initial step count for a pulse seen at detunings up to `max_detuning`.
pub fn initial_steps(spec: &PulseSpec, max_detuning: f64) -> usize {
    let sweep = match spec.shape {
        PulseShape::Sech { beta, chirp_mu, .. } => chirp_mu.abs() * beta / (2.0 * PI),
        PulseShape::Chirp { sweep_width, .. } => 0.5 * sweep_width.abs(),
        _ => 0.0,
    };
    let rate = 2.0 * PI * (spec.peak_rabi() + max_detuning.abs() + sweep);
    let span = 2.0 * spec.half_support();
    ((rate * span / STEP_PHASE).ceil() as usize).clamp(16, MAX_STEPS)
}

/// Step count for which doubling changes no map entry by more than `tol`,
/// checked at each of the given detunings.
pub fn converged_steps(spec: &PulseSpec, detunings: &[f64], tol: f64) -> Result<usize, PulseError> {
    let max_det = detunings.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut steps = initial_steps(spec, max_det);
    loop {
        let ok = detunings.iter().all(|&det| {
            let coarse = propagate_fixed(spec, det, steps);
            let fine = propagate_fixed(spec, det, 2 * steps);
            coarse.max_difference(&fine) <= tol
        });
        if ok {
            return Ok(steps);
        }
        steps *= 2;
        if steps > MAX_STEPS {
            return Err(PulseError::IntegrationFailure(MAX_STEPS));
        }
    }
}

/// Time-ordered solution of the driven two-level problem at one detuning
/// (Hz), to [`PROPAGATION_TOLERANCE`].
pub fn propagate_two_level(spec: &PulseSpec, detuning: f64) -> Result<TransferMap, PulseError> {
    spec.validate()?;
    if matches!(spec.shape, PulseShape::Ideal { .. }) || spec.is_zero() {
        return Ok(propagate_fixed(spec, detuning, 1));
    }
    let steps = converged_steps(spec, &[detuning], PROPAGATION_TOLERANCE)?;
    Ok(propagate_fixed(spec, detuning, 2 * steps))
}

/// Mean lower -> upper transfer probability over a detuning profile.
pub fn transfer_efficiency(spec: &PulseSpec, profile: &SpectralProfile) -> Result<f64, PulseError> {
    transfer_efficiency_with(spec, profile, 81, Execution::default())
}

pub fn transfer_efficiency_with(
    spec: &PulseSpec,
    profile: &SpectralProfile,
    points: usize,
    execution: Execution,
) -> Result<f64, PulseError> {
    spec.validate()?;
    profile.validate()?;
    let nodes = profile.quadrature(points);
    if spec.is_zero() {
        return Ok(0.0);
    }
    let detunings: Vec<f64> = nodes.iter().map(|n| n.0).collect();
    let extremes = [
        detunings.iter().cloned().fold(f64::INFINITY, f64::min),
        0.0,
        detunings.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ];
    let steps = if matches!(spec.shape, PulseShape::Ideal { .. }) {
        1
    } else {
        2 * converged_steps(spec, &extremes, PROPAGATION_TOLERANCE)?
    };
    let probs = exec::map(execution, &nodes, |&(det, w)| w * propagate_fixed(spec, det, steps).transfer_probability());
    Ok(probs.iter().sum::<f64>().clamp(0.0, 1.0))
}

/// Result of [`optimize_sech`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SechDesign {
    pub peak_rabi: f64,
    pub beta: f64,
    pub chirp_mu: f64,
    pub efficiency: f64,
}

impl SechDesign {
    pub fn shape(&self) -> PulseShape {
        PulseShape::Sech { peak_rabi: self.peak_rabi, beta: self.beta, chirp_mu: self.chirp_mu }
    }
}

/// Finds the hyperbolic-secant parameters that maximize mean inversion over
/// `profile` for a pulse whose truncated support is `duration` long, with
/// the peak Rabi frequency limited to `max_rabi` Hz.
///
/// The support pins beta; peak Rabi frequency and chirp are searched by
/// cyclic golden-section line searches.
pub fn optimize_sech(
    transition: Transition,
    duration: f64,
    profile: &SpectralProfile,
    max_rabi: f64,
) -> Result<SechDesign, PulseError> {
    profile.validate()?;
    if !(duration > 0.0) || !(max_rabi > 0.0) {
        return Err(PulseError::NonPositiveWidth);
    }
    let beta = 2.0 * TRUNCATION_WIDTHS / duration;
    let make = |rabi: f64, mu: f64| PulseSpec {
        transition,
        center_time: 0.0,
        shape: PulseShape::Sech { peak_rabi: rabi, beta, chirp_mu: mu },
        nominal_area: PI,
        phase: 0.0,
        direction: [1.0, 0.0],
        role: PulseRole::Control,
    };
    let objective = |rabi: f64, mu: f64| -> f64 {
        transfer_efficiency_with(&make(rabi, mu), profile, 41, Execution::default()).unwrap_or(0.0)
    };

    let mu_range = (0.0, 12.0);
    let rabi_range = (0.05 * max_rabi, max_rabi);

    // Coarse grid to land in the right basin before the line searches.
    let mut best = (max_rabi, 2.0, f64::NEG_INFINITY);
    for i in 0..=6 {
        for j in 0..=6 {
            let rabi = rabi_range.0 + (rabi_range.1 - rabi_range.0) * i as f64 / 6.0;
            let mu = mu_range.0 + (mu_range.1 - mu_range.0) * j as f64 / 6.0;
            let value = objective(rabi, mu);
            if value > best.2 {
                best = (rabi, mu, value);
            }
        }
    }
    let (mut rabi, mut mu, mut value) = best;
    for _ in 0..4 {
        let span_r = 0.25 * (rabi_range.1 - rabi_range.0);
        let (r, v) = golden_max(
            |r| objective(r, mu),
            (rabi - span_r).max(rabi_range.0),
            (rabi + span_r).min(rabi_range.1),
            1e-4 * max_rabi,
        );
        if v > value {
            rabi = r;
            value = v;
        }
        let span_m = 0.25 * (mu_range.1 - mu_range.0);
        let (m, v) =
            golden_max(|m| objective(rabi, m), (mu - span_m).max(mu_range.0), (mu + span_m).min(mu_range.1), 1e-4);
        if v > value {
            mu = m;
            value = v;
        }
    }
    let efficiency = transfer_efficiency(&make(rabi, mu), profile)?;
    Ok(SechDesign { peak_rabi: rabi, beta, chirp_mu: mu, efficiency })
}

/// Golden-section search for the maximum of `f` on `[a, b]`, returning the
/// best point seen (endpoints included) and its value.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (fa, fb) = (f(a), f(b));
    let mut best = if fa >= fb { (a, fa) } else { (b, fb) };
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        for (x, v) in [(c, fc), (d, fd)] {
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse(shape: PulseShape, area: f64) -> PulseSpec {
        PulseSpec {
            transition: Transition::F35,
            center_time: 1.0e-6,
            shape,
            nominal_area: area,
            phase: 0.3,
            direction: [1.0, 0.0],
            role: PulseRole::Control,
        }
    }

    #[test]
    fn gaussian_peak_and_half_maximum() {
        let spec = pulse(PulseShape::Gaussian { fwhm: 2.62e-6 }, 0.1);
        let peak = spec.peak_rabi();
        assert!((envelope(&spec, 1.0e-6).norm() - peak).abs() < 1e-12 * peak);
        for dt in [-1.31e-6, 1.31e-6] {
            let v = envelope(&spec, 1.0e-6 + dt).norm();
            assert!((v / peak - 0.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn sech_peak_has_no_chirp() {
        let spec = pulse(PulseShape::Sech { peak_rabi: 1e6, beta: 2e6, chirp_mu: 4.0 }, PI);
        let v = envelope(&spec, spec.center_time);
        assert!((v.norm() - 1e6).abs() < 1e-6);
        assert!((v.arg() - spec.phase).abs() < 1e-12);
        assert_eq!(instantaneous_detuning(&spec, spec.center_time), 0.0);
    }

    #[test]
    fn envelope_is_zero_outside_support() {
        let spec = pulse(PulseShape::Sech { peak_rabi: 1e6, beta: 2e6, chirp_mu: 4.0 }, PI);
        let (_, end) = spec.support();
        assert_eq!(envelope(&spec, end + 1e-12), Complex64::new(0.0, 0.0));
        let g = pulse(PulseShape::Gaussian { fwhm: 1e-6 }, 1.0);
        assert_eq!(envelope(&g, g.support().0 - 1e-12), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn gaussian_area_matches_nominal() {
        let spec = pulse(PulseShape::Gaussian { fwhm: 2.62e-6 }, 0.7);
        let (a, b) = spec.support();
        let n = 20_000;
        let h = (b - a) / n as f64;
        let area: f64 = (0..n).map(|i| envelope(&spec, a + (i as f64 + 0.5) * h).norm() * h).sum::<f64>() * 2.0 * PI;
        assert!((area - 0.7).abs() < 1e-6, "{area}");
    }

    #[test]
    fn resonant_square_pi_pulse_inverts() {
        let spec = pulse(PulseShape::Chirp { sweep_width: 0.0, duration: 1e-6 }, PI);
        let u = propagate_two_level(&spec, 0.0).unwrap();
        let out = u.apply([Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        assert!((out[1].norm_sqr() - 1.0).abs() < 1e-6);
        // (0, -i e^{i phi}) exactly for a resonant pulse.
        let expect = Complex64::new(0.0, -1.0) * Complex64::from_polar(1.0, spec.phase);
        assert!((out[1] - expect).norm() < 1e-6, "{:?}", out[1]);
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let spec = pulse(PulseShape::Gaussian { fwhm: 1e-6 }, 0.0);
        let u = propagate_two_level(&spec, 3e5).unwrap();
        assert!(u.max_difference(&TransferMap::identity()) == 0.0);
        let sech = pulse(PulseShape::Sech { peak_rabi: 0.0, beta: 1e6, chirp_mu: 3.0 }, PI);
        assert_eq!(propagate_two_level(&sech, 1e5).unwrap(), TransferMap::identity());
    }

    #[test]
    fn maps_are_unitary() {
        let spec = pulse(PulseShape::Sech { peak_rabi: 8e5, beta: 2.67e6, chirp_mu: 3.0 }, PI);
        for det in [-1e6, -2e5, 0.0, 4e5, 1.3e6] {
            let u = propagate_two_level(&spec, det).unwrap();
            assert!(u.unitarity_error() < 1e-9);
        }
    }

    #[test]
    fn ideal_map_ignores_detuning() {
        let spec = pulse(PulseShape::Ideal { duration: 1e-6 }, PI);
        let a = propagate_two_level(&spec, 0.0).unwrap();
        let b = propagate_two_level(&spec, 5e5).unwrap();
        assert_eq!(a, b);
        assert!((a.transfer_probability() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn delta_profile_ideal_pulse_is_unity() {
        let spec = pulse(PulseShape::Ideal { duration: 1e-6 }, PI);
        let eta = transfer_efficiency(&spec, &SpectralProfile::Delta { center: 0.0 }).unwrap();
        assert!((eta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_pulse_transfers_nothing() {
        let spec = pulse(PulseShape::Sech { peak_rabi: 0.0, beta: 1e6, chirp_mu: 2.0 }, PI);
        assert_eq!(transfer_efficiency(&spec, &SpectralProfile::gaussian(7e5)).unwrap(), 0.0);
    }

    #[test]
    fn unnormalized_profile_rejected() {
        let spec = pulse(PulseShape::Ideal { duration: 1e-6 }, PI);
        let p = SpectralProfile::Tabulated { frequencies: vec![0.0, 1.0], density: vec![3.0, 3.0] };
        assert!(matches!(
            transfer_efficiency(&spec, &p),
            Err(PulseError::Profile(ProfileError::UnnormalizedProfile { .. }))
        ));
    }

    #[test]
    fn invalid_pulse_rejected() {
        let mut spec = pulse(PulseShape::Gaussian { fwhm: -1.0 }, 1.0);
        assert_eq!(spec.validate(), Err(PulseError::NonPositiveWidth));
        spec.shape = PulseShape::Gaussian { fwhm: 1.0e-6 };
        spec.direction = [1.0, 1e-3];
        assert!(matches!(spec.validate(), Err(PulseError::UnnormalizedDirection(_))));
    }

    #[test]
    fn table_matches_direct_maps() {
        let spec = pulse(PulseShape::Sech { peak_rabi: 7e5, beta: 2.67e6, chirp_mu: 4.0 }, PI);
        let steps = 2 * converged_steps(&spec, &[-2e6, 0.0, 2e6], PROPAGATION_TOLERANCE).unwrap();
        let prop = Propagator::new(&spec, steps);
        let table = prop.tabulate(-2e6, 2e6, Propagator::table_step(&spec));
        for i in 0..200 {
            let det = -2e6 + 4e6 * (i as f64 + 0.37) / 200.0;
            let direct = prop.map(det);
            let interp = table.map(det);
            assert!(direct.max_difference(&interp) < 1e-6, "{det}");
            assert!(interp.unitarity_error() < 1e-12);
        }
        let gauss = pulse(PulseShape::Gaussian { fwhm: 2.62e-6 }, 0.1);
        let prop = Propagator::new(&gauss, 4000);
        let table = prop.tabulate(-1e6, 1e6, Propagator::table_step(&gauss));
        for i in 0..100 {
            let det = -1e6 + 2e6 * (i as f64 + 0.21) / 100.0;
            assert!(prop.map(det).max_difference(&table.map(det)) < 1e-6);
        }
    }

    /// Plain RK4 on the state vector, starting in the lower level.
    fn rk4_transfer(spec: &PulseSpec, detuning: f64, steps: usize) -> f64 {
        let (t0, t1) = spec.support();
        let h = (t1 - t0) / steps as f64;
        let i = Complex64::new(0.0, 1.0);
        let deriv = |t: f64, psi: [Complex64; 2]| {
            let omega = envelope(spec, t) * PI;
            let d = PI * detuning;
            [-i * (-d * psi[0] + omega.conj() * psi[1]), -i * (omega * psi[0] + d * psi[1])]
        };
        let axpy = |a: [Complex64; 2], k: [Complex64; 2], f: f64| [a[0] + k[0] * f, a[1] + k[1] * f];
        let mut psi = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        for n in 0..steps {
            let t = t0 + n as f64 * h;
            let k1 = deriv(t, psi);
            let k2 = deriv(t + 0.5 * h, axpy(psi, k1, 0.5 * h));
            let k3 = deriv(t + 0.5 * h, axpy(psi, k2, 0.5 * h));
            let k4 = deriv(t + h, axpy(psi, k3, h));
            for j in 0..2 {
                psi[j] += (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) * (h / 6.0);
            }
        }
        psi[1].norm_sqr()
    }

    fn pi13_sech() -> PulseSpec {
        PulseSpec {
            transition: Transition::F13,
            shape: PulseShape::Sech { peak_rabi: 1.28e6, beta: 2.0 * TRUNCATION_WIDTHS / 1.5e-6, chirp_mu: 4.0 },
            nominal_area: PI,
            ..pulse(PulseShape::Ideal { duration: 1e-6 }, PI)
        }
    }

    #[test]
    fn sech_transfer_matches_fine_rk4() {
        let spec = pi13_sech();
        for det in [-9e5, -3e5, 0.0, 2e5, 6e5] {
            let fast = propagate_two_level(&spec, det).unwrap().transfer_probability();
            let oracle = rk4_transfer(&spec, det, 40_000);
            assert!((fast - oracle).abs() < 1e-6, "{det}: {fast} vs {oracle}");
        }
    }

    #[test]
    fn doubling_resolution_changes_maps_little() {
        let spec = pi13_sech();
        for det in [-5e5, 0.0, 7e5] {
            let steps = converged_steps(&spec, &[det], PROPAGATION_TOLERANCE).unwrap();
            let a = propagate_fixed(&spec, det, 2 * steps);
            let b = propagate_fixed(&spec, det, 4 * steps);
            assert!(a.max_difference(&b) < 1e-6);
        }
    }

    #[test]
    fn optimized_sech_reaches_control_target() {
        let profile = SpectralProfile::gaussian(700e3);
        let design = optimize_sech(Transition::F13, 1.5e-6, &profile, 1.28e6).unwrap();
        assert!((design.efficiency - 0.938).abs() <= 0.03, "{}", design.efficiency);
        assert!(design.peak_rabi <= 1.28e6 + 1.0);
        assert!((design.beta * 1.5e-6 - 2.0 * TRUNCATION_WIDTHS).abs() < 1e-9);
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, v) = golden_max(|x| -(x - 0.3) * (x - 0.3), -1.0, 2.0, 1e-9);
        assert!((x - 0.3).abs() < 1e-6);
        assert!(v.abs() < 1e-12);
    }
}
