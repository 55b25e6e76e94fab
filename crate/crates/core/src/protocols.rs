//! Protocol sequences, echo prediction, and analytic efficiencies.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ionensemble::Geometry;
use crate::physmodel::{wavenumber, LevelLabel, MaterialParams, Model, Transition};
use crate::pulseshape::{golden_max, PulseRole, PulseShape, PulseSpec};

/// Default echo-silencing threshold on `mismatch_norm * length`.
pub const SILENCING_THRESHOLD: f64 = 2.0 * PI;

/// Slack allowed when comparing pulse and window edges, s.
pub const TIME_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("pulse timings must be strictly increasing")]
    NonMonotoneTimings,
    #[error("echo window starting at {window_start:e} s overlaps the last pulse ending at {pulse_end:e} s")]
    EchoOverlapsPulse { window_start: f64, pulse_end: f64 },
    #[error("timing constraints admit no solution: {0}")]
    InfeasibleConstraints(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolTag {
    Nlpe,
    Rose,
    Fle4,
    Pe2,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionWindow {
    pub label: String,
    pub start: f64,
    pub end: f64,
    pub transition: Transition,
    /// Unit detection direction.
    pub direction: [f64; 2],
}

impl DetectionWindow {
    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    pub pulses: Vec<PulseSpec>,
    pub windows: Vec<DetectionWindow>,
    pub geometry: Geometry,
    pub tag: ProtocolTag,
    /// Emission sampling step inside windows, s.
    pub grid_step: f64,
}

/// Pulse centre times t0..t4 in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpeTimings {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

impl NlpeTimings {
    pub fn reference() -> Self {
        Self { t0: 0.0, t1: 4.1e-6, t2: 6.6e-6, t3: 15.0e-6, t4: 17.4e-6 }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.t0, self.t1, self.t2, self.t3, self.t4]
    }

    pub fn from_array(t: [f64; 5]) -> Self {
        Self { t0: t[0], t1: t[1], t2: t[2], t3: t[3], t4: t[4] }
    }

    pub fn is_monotone(&self) -> bool {
        self.as_array().windows(2).all(|w| w[1] > w[0])
    }

    /// Echo time t4 + t3 - t2 - t1 + t0.
    pub fn echo_time(&self) -> f64 {
        (self.t4 - self.t1) + (self.t3 - self.t2) + self.t0
    }

    /// Spin-storage time t4 - t1.
    pub fn tau2(&self) -> f64 {
        self.t4 - self.t1
    }

    /// Optical storage time t3 - t2.
    pub fn optical_storage(&self) -> f64 {
        self.t3 - self.t2
    }

    /// Consecutive gaps (t1-t0, t2-t1, t3-t2, t4-t3).
    pub fn gaps(&self) -> [f64; 4] {
        [self.t1 - self.t0, self.t2 - self.t1, self.t3 - self.t2, self.t4 - self.t3]
    }

    pub fn from_gaps(t0: f64, gaps: [f64; 4]) -> Self {
        let t1 = t0 + gaps[0];
        let t2 = t1 + gaps[1];
        let t3 = t2 + gaps[2];
        Self { t0, t1, t2, t3, t4: t3 + gaps[3] }
    }
}

/// Pulse shapes and detection settings shared by the sequence builders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSet {
    pub signal: PulseShape,
    /// Signal pulse area, rad.
    pub signal_area: f64,
    pub pi35: PulseShape,
    pub pi13: PulseShape,
    /// Rephasing pulse for two-level variants (on the signal transition).
    pub pi15: PulseShape,
    pub window_width: f64,
    pub grid_step: f64,
}

impl Default for PulseSet {
    fn default() -> Self {
        Self {
            signal: PulseShape::Gaussian { fwhm: 2.62e-6 },
            signal_area: 0.1,
            pi35: PulseShape::Ideal { duration: 3.75e-6 },
            pi13: PulseShape::Ideal { duration: 1.5e-6 },
            pi15: PulseShape::Ideal { duration: 1.5e-6 },
            window_width: 4e-6,
            grid_step: 10e-9,
        }
    }
}

impl PulseSet {
    pub fn signal_pulse(&self, t0: f64, geometry: &Geometry) -> PulseSpec {
        PulseSpec {
            transition: Transition::F15,
            center_time: t0,
            shape: self.signal,
            nominal_area: self.signal_area,
            phase: 0.0,
            direction: geometry.signal_direction(),
            role: PulseRole::Signal,
        }
    }

    pub fn control(&self, transition: Transition, t: f64, geometry: &Geometry) -> PulseSpec {
        let shape = match transition {
            Transition::F35 => self.pi35,
            Transition::F13 => self.pi13,
            _ => self.pi15,
        };
        PulseSpec {
            transition,
            center_time: t,
            shape,
            nominal_area: PI,
            phase: 0.0,
            direction: geometry.control_direction(),
            role: PulseRole::Control,
        }
    }

    fn window(&self, label: &str, center: f64, transition: Transition, geometry: &Geometry) -> DetectionWindow {
        DetectionWindow {
            label: label.to_string(),
            start: center - 0.5 * self.window_width,
            end: center + 0.5 * self.window_width,
            transition,
            direction: geometry.signal_direction(),
        }
    }
}

/// Signal on f15 followed by pi35, pi13, pi13, pi35, with the echo window
/// centred at t5.
pub fn build_nlpe(timings: &NlpeTimings, pulses: &PulseSet, geometry: &Geometry) -> Result<Sequence, ProtocolError> {
    if !timings.is_monotone() {
        return Err(ProtocolError::NonMonotoneTimings);
    }
    let t = timings;
    let seq_pulses = vec![
        pulses.signal_pulse(t.t0, geometry),
        pulses.control(Transition::F35, t.t1, geometry),
        pulses.control(Transition::F13, t.t2, geometry),
        pulses.control(Transition::F13, t.t3, geometry),
        pulses.control(Transition::F35, t.t4, geometry),
    ];
    let window = pulses.window("echo", t.echo_time(), Transition::F15, geometry);
    let pulse_end = seq_pulses[4].support().1;
    if window.start < pulse_end - TIME_TOLERANCE {
        return Err(ProtocolError::EchoOverlapsPulse { window_start: window.start, pulse_end });
    }
    Ok(Sequence {
        pulses: seq_pulses,
        windows: vec![window],
        geometry: *geometry,
        tag: ProtocolTag::Nlpe,
        grid_step: pulses.grid_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Pe2,
    Fle4,
    Rose,
}

/// Baseline sequences. `times` holds the pulse centres (signal first):
/// two for PE2, three for FLE4 and ROSE.
pub fn build_variant(
    kind: VariantKind,
    times: &[f64],
    pulses: &PulseSet,
    geometry: &Geometry,
) -> Result<Sequence, ProtocolError> {
    let needed = if kind == VariantKind::Pe2 { 2 } else { 3 };
    if times.len() != needed || !times.windows(2).all(|w| w[1] > w[0]) {
        return Err(ProtocolError::NonMonotoneTimings);
    }
    let signal = pulses.signal_pulse(times[0], geometry);
    let (seq_pulses, window, tag) = match kind {
        VariantKind::Pe2 => (
            vec![signal, pulses.control(Transition::F15, times[1], geometry)],
            pulses.window("echo", 2.0 * times[1] - times[0], Transition::F15, geometry),
            ProtocolTag::Pe2,
        ),
        VariantKind::Fle4 => (
            vec![
                signal,
                pulses.control(Transition::F35, times[1], geometry),
                pulses.control(Transition::F13, times[2], geometry),
            ],
            pulses.window("echo", times[2] + times[1] - times[0], Transition::F33, geometry),
            ProtocolTag::Fle4,
        ),
        VariantKind::Rose => (
            vec![
                signal,
                pulses.control(Transition::F15, times[1], geometry),
                pulses.control(Transition::F15, times[2], geometry),
            ],
            pulses.window("echo", 2.0 * times[2] - 2.0 * times[1] + times[0], Transition::F15, geometry),
            ProtocolTag::Rose,
        ),
    };
    Ok(Sequence { pulses: seq_pulses, windows: vec![window], geometry: *geometry, tag, grid_step: pulses.grid_step })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoPrediction {
    pub time: f64,
    /// Wavevector of the emitting macroscopic polarization, rad/m.
    pub wavevector: [f64; 2],
    pub transition: Transition,
    pub silenced: bool,
    /// | |k_echo| - k_transition |, rad/m.
    pub mismatch_norm: f64,
}

#[derive(Debug, Clone)]
struct Pathway {
    ket: LevelLabel,
    bra: LevelLabel,
    /// Signed count of each pulse's wavevector in the coherence phase.
    k_counts: Vec<i32>,
    /// Accumulated optical-detuning phase coefficient, s.
    phase: f64,
}

fn optical_weight(level: LevelLabel) -> f64 {
    if level.is_excited() {
        1.0
    } else {
        0.0
    }
}

/// Sums `count * k` per distinct beam, grouping identical beams before
/// adding so that cancelling pairs cancel exactly.
fn grouped_wavevector(counts: &[i32], pulses: &[PulseSpec], model: &Model, geometry: &Geometry) -> [f64; 2] {
    let mut groups: Vec<(Transition, [u64; 2], i32)> = Vec::new();
    for (pulse, &c) in pulses.iter().zip(counts) {
        if c == 0 {
            continue;
        }
        let key = [pulse.direction[0].to_bits(), pulse.direction[1].to_bits()];
        match groups.iter_mut().find(|g| g.0 == pulse.transition && g.1 == key) {
            Some(g) => g.2 += c,
            None => groups.push((pulse.transition, key, c)),
        }
    }
    let mut k = [0.0, 0.0];
    for (transition, key, c) in groups {
        if c == 0 {
            continue;
        }
        let mag = wavenumber(model.scheme().carrier(transition), geometry.refractive_index);
        k[0] += c as f64 * mag * f64::from_bits(key[0]);
        k[1] += c as f64 * mag * f64::from_bits(key[1]);
    }
    k
}

/// Enumerates the rephasing pathways of `seq` starting from the coherence
/// written by its first pulse, and reports every echo with its phase
/// matching status.
pub fn predict_echoes(seq: &Sequence, model: &Model) -> Vec<EchoPrediction> {
    predict_echoes_with(seq, model, SILENCING_THRESHOLD)
}

pub fn predict_echoes_with(seq: &Sequence, model: &Model, threshold: f64) -> Vec<EchoPrediction> {
    let Some(signal) = seq.pulses.first() else {
        return Vec::new();
    };
    let n = seq.pulses.len();
    let (lower, upper) = signal.transition.levels();
    let mut counts = vec![0; n];
    counts[0] = 1;
    let mut paths = vec![Pathway { ket: upper, bra: lower, k_counts: counts, phase: 0.0 }];
    let mut echoes: Vec<EchoPrediction> = Vec::new();

    for i in 0..n {
        let start = seq.pulses[i].center_time;
        if i > 0 {
            let pulse = &seq.pulses[i];
            let (l, u) = pulse.transition.levels();
            let area = pulse.nominal_area.rem_euclid(2.0 * PI);
            let full = (area - PI).abs() < 1e-9;
            let none = area.abs() < 1e-9 || pulse.is_zero();
            let mut next = Vec::new();
            for path in &paths {
                let ket_options = side_options(path.ket, l, u, full, none, 1);
                let bra_options = side_options(path.bra, l, u, full, none, -1);
                for &(ket, dk) in &ket_options {
                    for &(bra, db) in &bra_options {
                        let mut k_counts = path.k_counts.clone();
                        k_counts[i] += dk + db;
                        next.push(Pathway { ket, bra, k_counts, phase: path.phase });
                    }
                }
            }
            paths = next;
        }
        let end = seq.pulses.get(i + 1).map(|p| p.center_time).unwrap_or(f64::INFINITY);
        for path in &mut paths {
            let rate = optical_weight(path.ket) - optical_weight(path.bra);
            if rate != 0.0 && path.phase != 0.0 {
                let t_echo = start - path.phase / rate;
                if t_echo > start && t_echo < end {
                    if let Some(transition) = Transition::between(path.ket, path.bra) {
                        let k = grouped_wavevector(&path.k_counts, &seq.pulses, model, &seq.geometry);
                        let emitting_upper = path.ket.is_excited();
                        let k_emit = if emitting_upper { k } else { [-k[0], -k[1]] };
                        let k_line = wavenumber(model.scheme().carrier(transition), seq.geometry.refractive_index);
                        let mismatch_norm = (k_emit[0].hypot(k_emit[1]) - k_line).abs();
                        let duplicate = echoes.iter().any(|e| {
                            e.transition == transition && (e.time - t_echo).abs() <= 1e-12 * t_echo.abs().max(1e-9)
                        });
                        if !duplicate {
                            echoes.push(EchoPrediction {
                                time: t_echo,
                                wavevector: k_emit,
                                transition,
                                silenced: mismatch_norm * seq.geometry.length > threshold,
                                mismatch_norm,
                            });
                        }
                    }
                }
            }
            if end.is_finite() {
                path.phase += rate * (end - start);
            }
        }
    }
    echoes.sort_by(|a, b| a.time.total_cmp(&b.time));
    echoes
}

/// Possible outcomes for one side (ket sign +1, bra -1) of a coherence under
/// a pulse on (l, u): the new level and the wavevector count it adds.
fn side_options(
    level: LevelLabel,
    l: LevelLabel,
    u: LevelLabel,
    full: bool,
    none: bool,
    sign: i32,
) -> Vec<(LevelLabel, i32)> {
    let swapped = if level == l {
        Some((u, sign))
    } else if level == u {
        Some((l, -sign))
    } else {
        None
    };
    match swapped {
        None => vec![(level, 0)],
        Some(_) if none => vec![(level, 0)],
        Some(s) if full => vec![s],
        Some(s) => vec![(level, 0), s],
    }
}

fn gaussian_dephasing(fwhm: f64, tau: f64) -> f64 {
    (-(fwhm * tau * PI).powi(2) / (2.0 * LN_2)).exp()
}

/// Analytic NLPE storage efficiency.
pub fn nlpe_efficiency(params: &MaterialParams, timings: &NlpeTimings, eta_control: f64) -> f64 {
    nlpe_efficiency_delays(params, timings.tau2(), timings.optical_storage(), eta_control)
}

/// Same as [`nlpe_efficiency`] with the spin storage time `tau2` = t4 - t1
/// and optical storage time `t32` = t3 - t2 given directly.
pub fn nlpe_efficiency_delays(params: &MaterialParams, tau2: f64, t32: f64, eta_control: f64) -> f64 {
    let d = params.d;
    d * d
        * (-d).exp()
        * eta_control.powi(4)
        * gaussian_dephasing(params.gamma13, tau2)
        * gaussian_dephasing(params.gamma35bar, t32)
        * (-2.0 * params.gamma_opt * t32).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayVariable {
    /// Spin storage time t4 - t1.
    Tau2,
    /// Twice the optical storage time, 2 (t3 - t2).
    Tau3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub variable: DecayVariable,
    pub delays: Vec<f64>,
    pub efficiency: Vec<f64>,
}

impl DecayCurve {
    pub fn to_csv(&self) -> String {
        let name = match self.variable {
            DecayVariable::Tau2 => "tau2",
            DecayVariable::Tau3 => "tau3",
        };
        let mut out = format!("{name},eta\n");
        for (t, e) in self.delays.iter().zip(&self.efficiency) {
            out.push_str(&format!("{t:e},{e:e}\n"));
        }
        out
    }
}

/// Analytic decay curve with the other storage time pinned to `pinned`.
pub fn decay_curve(
    params: &MaterialParams,
    variable: DecayVariable,
    grid: &[f64],
    pinned: &NlpeTimings,
    eta_control: f64,
) -> DecayCurve {
    let efficiency = grid
        .iter()
        .map(|&tau| match variable {
            DecayVariable::Tau2 => nlpe_efficiency_delays(params, tau, pinned.optical_storage(), eta_control),
            DecayVariable::Tau3 => nlpe_efficiency_delays(params, pinned.tau2(), 0.5 * tau, eta_control),
        })
        .collect();
    DecayCurve { variable, delays: grid.to_vec(), efficiency }
}

/// Parameters recovered from a decay curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    /// Inhomogeneous FWHM of the dephasing spin transition, Hz.
    pub gamma_spin: f64,
    /// Optical decoherence rate, s^-1 (tau3 fits only).
    pub gamma_opt: Option<f64>,
}

/// Least-squares fit of ln(eta) against the decay model.
///
/// For `Tau2` the model is A exp(-pi^2 G^2 tau^2 / (2 ln 2)). For `Tau3`
/// the optical storage time is tau/2 and the model adds exp(-gamma tau);
/// passing `fixed_gamma_opt` removes gamma from the fit.
pub fn fit_decay(curve: &DecayCurve, fixed_gamma_opt: Option<f64>) -> Option<DecayFit> {
    let points: Vec<(f64, f64)> =
        curve.delays.iter().zip(&curve.efficiency).filter(|(_, e)| **e > 0.0).map(|(t, e)| (*t, e.ln())).collect();
    let scale = match curve.variable {
        DecayVariable::Tau2 => 1.0,
        DecayVariable::Tau3 => 0.25,
    };
    let with_rate = curve.variable == DecayVariable::Tau3 && fixed_gamma_opt.is_none();
    let cols = if with_rate { 3 } else { 2 };
    if points.len() < cols {
        return None;
    }
    let rows: Vec<(Vec<f64>, f64)> = points
        .iter()
        .map(|&(t, y)| {
            let mut y = y;
            if curve.variable == DecayVariable::Tau3 {
                if let Some(g) = fixed_gamma_opt {
                    y += g * t;
                }
            }
            let mut x = vec![1.0, -PI * PI * scale * t * t / (2.0 * LN_2)];
            if with_rate {
                x.push(-t);
            }
            (x, y)
        })
        .collect();
    let a = nalgebra::DMatrix::from_fn(rows.len(), cols, |i, j| rows[i].0[j]);
    let b = nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let sol = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let gamma_sq = sol[1];
    Some(DecayFit {
        amplitude: sol[0].exp(),
        gamma_spin: gamma_sq.max(0.0).sqrt(),
        gamma_opt: if with_rate { Some(sol[2]) } else { fixed_gamma_opt },
    })
}

/// Square-tooth forward AFC efficiency at finesse `f`.
pub fn afc_efficiency(d: f64, f: f64) -> f64 {
    let x = PI / f;
    let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
    let de = d / f;
    de * de * (-de).exp() * sinc * sinc
}

/// Finesse maximizing [`afc_efficiency`] over (1, 20] and the maximum.
pub fn afc_optimal_efficiency(d: f64) -> (f64, f64) {
    const POINTS: usize = 2000;
    let (lo, hi) = (1.0, 20.0);
    let step = (hi - lo) / POINTS as f64;
    let mut best = (hi, afc_efficiency(d, hi));
    for i in 1..=POINTS {
        let f = lo + i as f64 * step;
        let v = afc_efficiency(d, f);
        if v > best.1 {
            best = (f, v);
        }
    }
    let a = (best.0 - step).max(lo + 1e-12);
    let b = (best.0 + step).min(hi);
    let refined = golden_max(|f| afc_efficiency(d, f), a, b, 1e-10);
    if refined.1 >= best.1 {
        refined
    } else {
        best
    }
}

/// Bounds on the four consecutive pulse gaps and on the echo separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConstraints {
    pub min_gaps: [f64; 4],
    pub max_gaps: [f64; 4],
    /// Minimum t5 - t4, s.
    pub echo_separation: f64,
}

impl TimingConstraints {
    /// Separations implied by the pulse durations, with the echo window
    /// clear of the last pulse and the optical storage at least `wait`.
    pub fn from_pulses(pulses: &PulseSet, wait: f64, max_gap: f64) -> Self {
        let half = |shape: PulseShape| {
            PulseSpec {
                transition: Transition::F15,
                center_time: 0.0,
                shape,
                nominal_area: PI,
                phase: 0.0,
                direction: [1.0, 0.0],
                role: PulseRole::Control,
            }
            .half_support()
        };
        let (h35, h13) = (half(pulses.pi35), half(pulses.pi13));
        Self {
            min_gaps: [h35 + 0.5 * pulses.window_width, h35 + h13, wait.max(2.0 * h13), h13 + h35],
            max_gaps: [max_gap; 4],
            echo_separation: h35 + 0.5 * pulses.window_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizedTimings {
    pub timings: NlpeTimings,
    pub efficiency: f64,
}

/// Coordinate descent with golden-section line searches over the gaps.
pub fn optimize_timings(
    params: &MaterialParams,
    constraints: &TimingConstraints,
    eta_control: f64,
) -> Result<OptimizedTimings, ProtocolError> {
    let lo = constraints.min_gaps;
    let hi = constraints.max_gaps;
    for i in 0..4 {
        if !(lo[i] > 0.0) || !(hi[i] >= lo[i]) {
            return Err(ProtocolError::InfeasibleConstraints(format!("gap {i} bounds [{}, {}]", lo[i], hi[i])));
        }
    }
    if lo[0] + constraints.echo_separation > hi[2] {
        return Err(ProtocolError::InfeasibleConstraints("echo separation exceeds the optical storage bound".into()));
    }
    let objective = |g: &[f64; 4]| nlpe_efficiency_delays(params, g[1] + g[2] + g[3], g[2], eta_control);
    let bounds = |g: &[f64; 4], i: usize| -> (f64, f64) {
        match i {
            0 => (lo[0], hi[0].min(g[2] - constraints.echo_separation)),
            2 => (lo[2].max(g[0] + constraints.echo_separation), hi[2]),
            _ => (lo[i], hi[i]),
        }
    };
    let mut gaps = [0.0; 4];
    gaps[0] = lo[0];
    gaps[1] = 0.5 * (lo[1] + hi[1]);
    gaps[2] = 0.5 * (lo[2].max(lo[0] + constraints.echo_separation) + hi[2]);
    gaps[3] = 0.5 * (lo[3] + hi[3]);
    let mut value = objective(&gaps);
    for _ in 0..50 {
        let previous = value;
        for i in 0..4 {
            let (a, b) = bounds(&gaps, i);
            let tol = 1e-12_f64.max(1e-9 * (b - a));
            let (x, v) = golden_max(
                |x| {
                    let mut g = gaps;
                    g[i] = x;
                    objective(&g)
                },
                a,
                b,
                tol,
            );
            if v >= value {
                gaps[i] = x;
                value = v;
            }
        }
        if (value - previous).abs() <= 1e-15 {
            break;
        }
    }
    Ok(OptimizedTimings { timings: NlpeTimings::from_gaps(0.0, gaps), efficiency: value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reference_window_centre() {
        let seq = build_nlpe(&NlpeTimings::reference(), &PulseSet::default(), &Geometry::default()).unwrap();
        assert!(close(seq.windows[0].center(), 21.7e-6, 1e-15));
        assert_eq!(seq.pulses.len(), 5);
    }

    #[test]
    fn symmetric_storage_intervals() {
        // t5 - t4 = (t3 - t2) - (t1 - t0), so the storage intervals match when t3 - t2 = 2 (t1 - t0)
        let s = NlpeTimings { t0: 0.0, t1: 2e-6, t2: 5e-6, t3: 9e-6, t4: 12e-6 };
        assert!(close(s.t1 - s.t0, s.echo_time() - s.t4, 1e-18));
    }

    #[test]
    fn early_echo_overlaps_last_pulse() {
        let t = NlpeTimings { t3: 12.0e-6, ..NlpeTimings::reference() };
        assert!(close(t.echo_time(), 18.7e-6, 1e-15));
        let err = build_nlpe(&t, &PulseSet::default(), &Geometry::default()).unwrap_err();
        assert!(matches!(err, ProtocolError::EchoOverlapsPulse { .. }));
    }

    #[test]
    fn unordered_timings_rejected() {
        let t = NlpeTimings { t2: 3e-6, ..NlpeTimings::reference() };
        assert_eq!(
            build_nlpe(&t, &PulseSet::default(), &Geometry::default()).unwrap_err(),
            ProtocolError::NonMonotoneTimings
        );
        assert_eq!(
            build_variant(VariantKind::Rose, &[0.0, 5e-6, 4e-6], &PulseSet::default(), &Geometry::default())
                .unwrap_err(),
            ProtocolError::NonMonotoneTimings
        );
    }

    #[test]
    fn variant_echo_times() {
        let p = PulseSet::default();
        let g = Geometry::default();
        let pe2 = build_variant(VariantKind::Pe2, &[0.0, 5e-6], &p, &g).unwrap();
        assert!(close(pe2.windows[0].center(), 10e-6, 1e-15));
        let rose = build_variant(VariantKind::Rose, &[0.0, 5e-6, 12e-6], &p, &g).unwrap();
        assert!(close(rose.windows[0].center(), 14e-6, 1e-15));
        let model = Model::default();
        let echoes = predict_echoes(&rose, &model);
        assert!(echoes.iter().any(|e| close(e.time, 14e-6, 1e-15) && !e.silenced));
        assert!(echoes.iter().any(|e| close(e.time, 10e-6, 1e-15) && e.silenced));
    }

    #[test]
    fn nlpe_echo_matches_input_direction() {
        let model = Model::default();
        let seq = build_nlpe(&NlpeTimings::reference(), &PulseSet::default(), &Geometry::default()).unwrap();
        let echoes = predict_echoes(&seq, &model);
        let last = echoes.last().unwrap();
        assert_eq!(last.transition, Transition::F15);
        assert!(close(last.time, NlpeTimings::reference().echo_time(), 1e-12 * 21.7e-6));
        let k0 = wavenumber(model.scheme().carrier(Transition::F15), 1.8);
        assert_eq!(last.wavevector, [k0, 0.0]);
        assert_eq!(last.mismatch_norm, 0.0);
        let fle4 = echoes.iter().find(|e| e.transition == Transition::F33).unwrap();
        assert!(fle4.silenced);
        assert!(close(fle4.time, 10.7e-6, 1e-15));
    }

    #[test]
    fn collinear_nothing_silenced() {
        let model = Model::default();
        let g = Geometry::default().collinear();
        let seq = build_nlpe(&NlpeTimings::reference(), &PulseSet::default(), &g).unwrap();
        let echoes = predict_echoes(&seq, &model);
        assert!(echoes.len() >= 2);
        assert!(echoes.iter().all(|e| !e.silenced), "{echoes:?}");
    }

    #[test]
    fn reference_efficiency_values() {
        let p = MaterialParams::default();
        let t = NlpeTimings::reference();
        assert!(close(nlpe_efficiency(&p, &t, 1.0), 0.1305, 0.0005));
        assert!(close(nlpe_efficiency(&p, &t, 0.938), 0.1010, 0.0005));
        let d = p.d;
        assert!(close(nlpe_efficiency_delays(&p, 0.0, 0.0, 1.0), d * d * (-d).exp(), 1e-15));
    }

    #[test]
    fn tau2_fit_recovers_width() {
        let p = MaterialParams::default();
        let grid: Vec<f64> = (1..=40).map(|i| i as f64 * 5e-6).collect();
        let curve = decay_curve(&p, DecayVariable::Tau2, &grid, &NlpeTimings::reference(), 1.0);
        let fit = fit_decay(&curve, None).unwrap();
        assert!(close(fit.gamma_spin / 5.6e3, 1.0, 0.01));
    }

    #[test]
    fn flat_curve_without_dephasing() {
        let p = MaterialParams { gamma13: 0.0, ..MaterialParams::default() };
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 1e-5).collect();
        let curve = decay_curve(&p, DecayVariable::Tau2, &grid, &NlpeTimings::reference(), 1.0);
        assert!(curve.efficiency.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn tau3_fit_recovers_both() {
        let p = MaterialParams::default();
        let grid: Vec<f64> = (1..=40).map(|i| i as f64 * 2e-6).collect();
        let curve = decay_curve(&p, DecayVariable::Tau3, &grid, &NlpeTimings::reference(), 1.0);
        let fit = fit_decay(&curve, None).unwrap();
        assert!(close(fit.gamma_spin / 18.6e3, 1.0, 0.02), "{fit:?}");
        assert!(close(fit.gamma_opt.unwrap() / 12e3, 1.0, 0.02), "{fit:?}");
    }

    #[test]
    fn afc_values() {
        assert!(close(afc_efficiency(0.6, 2.0), 0.0270, 1e-4));
        let (f, eta) = afc_optimal_efficiency(0.6);
        assert!(close(eta, 0.027, 0.001), "{eta}");
        assert!((2.0..=2.3).contains(&f), "{f}");
        assert!(afc_optimal_efficiency(1e-4).1 < 1e-8);
    }

    #[test]
    fn optimizer_collapses_to_lower_bounds() {
        let p = MaterialParams::default();
        let c = TimingConstraints { min_gaps: [1e-6; 4], max_gaps: [20e-6; 4], echo_separation: 1e-6 };
        let opt = optimize_timings(&p, &c, 1.0).unwrap();
        let g = opt.timings.gaps();
        assert!(close(g[1], 1e-6, 1e-12) && close(g[3], 1e-6, 1e-12));
        assert!(close(g[2], 2e-6, 1e-12), "{g:?}");
    }

    #[test]
    fn optimizer_respects_wait() {
        let p = MaterialParams::default();
        let c = TimingConstraints::from_pulses(&PulseSet::default(), 7e-6, 30e-6);
        let opt = optimize_timings(&p, &c, 0.938).unwrap();
        assert!(opt.timings.optical_storage() >= 7e-6 - 1e-15);
        assert!(opt.timings.echo_time() - opt.timings.t4 >= c.echo_separation - 1e-15);
        let seq = build_nlpe(&opt.timings, &PulseSet::default(), &Geometry::default());
        assert!(seq.is_ok(), "{seq:?}");
    }

    #[test]
    fn infeasible_constraints() {
        let p = MaterialParams::default();
        let c = TimingConstraints {
            min_gaps: [5e-6, 1e-6, 1e-6, 1e-6],
            max_gaps: [6e-6, 2e-6, 6e-6, 2e-6],
            echo_separation: 2e-6,
        };
        assert!(matches!(optimize_timings(&p, &c, 1.0), Err(ProtocolError::InfeasibleConstraints(_))));
    }
}
