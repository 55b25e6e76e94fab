//! Monte-Carlo ensemble of four-level ions.
//!
//! Each ion carries a 4x4 density matrix over (g1, g3, e3, e5) in the
//! interaction picture relative to the nominal level energies, so only the
//! ion's own detunings drive free evolution. Pulses act as instantaneous
//! centre-referenced maps; the spatial phase `k . r` of each beam is folded
//! into the drive phase seen by the ion.

use std::f64::consts::PI;

use nalgebra::Matrix4;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::physmodel::{wavenumber, LevelLabel, MaterialParams, Model, Transition};
use crate::profile::{fwhm_per_sigma, ProfileError, SpectralProfile};
use crate::protocols::{DetectionWindow, ProtocolTag, Sequence, TIME_TOLERANCE};
use crate::pulseshape::{self, Propagator, PulseError, PulseRole, PulseShape, PulseSpec, TransferMap};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("ensemble needs at least one ion")]
    EmptyEnsemble,
    #[error("transition {0:?} is not part of the level scheme")]
    UnknownTransition(Transition),
    #[error("detection window [{start}, {end}] is empty")]
    EmptyWindow { start: f64, end: f64 },
    #[error("pulse {pulse} overlaps detection window '{window}'")]
    OverlappingPulses { pulse: usize, window: String },
    #[error("pulses are not strictly time-ordered at index {0}")]
    UnorderedPulses(usize),
    #[error("grid step must be strictly positive")]
    InvalidGridStep,
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

/// Sample and beam geometry in the propagation plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    /// Sample length along the signal direction, m.
    pub length: f64,
    /// Transverse extent of the interaction region, m.
    pub waist: f64,
    /// Angle between signal and control beams, rad.
    pub control_angle: f64,
    pub refractive_index: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { length: 8e-3, waist: 100e-6, control_angle: 30e-3, refractive_index: 1.8 }
    }
}

impl Geometry {
    pub fn collinear(&self) -> Self {
        Self { control_angle: 0.0, ..*self }
    }

    pub fn signal_direction(&self) -> [f64; 2] {
        [1.0, 0.0]
    }

    pub fn control_direction(&self) -> [f64; 2] {
        [self.control_angle.cos(), self.control_angle.sin()]
    }
}

/// Density matrix over (g1, g3, e3, e5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix(pub [[Complex64; 4]; 4]);

impl DensityMatrix {
    pub fn pure(level: LevelLabel) -> Self {
        let mut m = [[ZERO; 4]; 4];
        let i = level.index();
        m[i][i] = Complex64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    pub fn from_amplitudes(psi: [Complex64; 4]) -> Self {
        let mut m = [[ZERO; 4]; 4];
        for j in 0..4 {
            for k in 0..4 {
                m[j][k] = psi[j] * psi[k].conj();
            }
        }
        DensityMatrix(m)
    }

    pub fn get(&self, row: LevelLabel, col: LevelLabel) -> Complex64 {
        self.0[row.index()][col.index()]
    }

    pub fn population(&self, level: LevelLabel) -> f64 {
        self.get(level, level).re
    }

    pub fn trace(&self) -> f64 {
        (0..4).map(|i| self.0[i][i].re).sum()
    }

    pub fn purity(&self) -> f64 {
        let mut sum = 0.0;
        for j in 0..4 {
            for k in 0..4 {
                sum += (self.0[j][k] * self.0[k][j]).re;
            }
        }
        sum
    }

    pub fn hermiticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..4 {
            for k in 0..4 {
                worst = worst.max((self.0[j][k] - self.0[k][j].conj()).norm());
            }
        }
        worst
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let m = Matrix4::from_fn(|j, k| 0.5 * (self.0[j][k] + self.0[k][j].conj()));
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        [ev[0], ev[1], ev[2], ev[3]]
    }

    /// rho -> M rho M^dagger with `map` acting on the (lower, upper) pair.
    pub fn apply_map(&mut self, map: &TransferMap, lower: usize, upper: usize) {
        let u = &map.0;
        let rho = &mut self.0;
        for col in 0..4 {
            let a = rho[lower][col];
            let b = rho[upper][col];
            rho[lower][col] = u[0][0] * a + u[0][1] * b;
            rho[upper][col] = u[1][0] * a + u[1][1] * b;
        }
        for row in rho.iter_mut() {
            let a = row[lower];
            let b = row[upper];
            row[lower] = a * u[0][0].conj() + b * u[0][1].conj();
            row[upper] = a * u[1][0].conj() + b * u[1][1].conj();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ion {
    /// Optical offset from the nominal f15 line, Hz.
    pub delta_opt: f64,
    /// Ground-spin (g1-g3) offset, Hz.
    pub delta_g: f64,
    /// Excited-spin (e3-e5) offset, Hz.
    pub delta_e: f64,
    pub position: [f64; 2],
    pub rho: DensityMatrix,
}

impl Ion {
    /// Residual energy of `level` in the rotating frame, Hz.
    pub fn level_offset(&self, level: LevelLabel) -> f64 {
        match level {
            LevelLabel::G1 => 0.0,
            LevelLabel::G3 => self.delta_g,
            LevelLabel::E5 => self.delta_opt,
            LevelLabel::E3 => self.delta_opt - self.delta_e,
        }
    }

    /// Detuning of `transition` for this ion (upper minus lower offset), Hz.
    pub fn detuning(&self, transition: Transition) -> f64 {
        let (lower, upper) = transition.levels();
        self.level_offset(upper) - self.level_offset(lower)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub ions: Vec<Ion>,
    pub seed: u64,
    pub geometry: Geometry,
    pub execution: Execution,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.ions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ions.is_empty()
    }

    /// Ensemble-mean population of each level, in level-index order.
    pub fn mean_populations(&self) -> [f64; 4] {
        let parts = exec::map_blocks(self.execution, &self.ions, |block| {
            let mut acc = [0.0; 4];
            for ion in block {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += ion.rho.0[i][i].re;
                }
            }
            acc
        });
        let total = exec::tree_reduce(parts, |mut a, b| {
            for i in 0..4 {
                a[i] += b[i];
            }
            a
        })
        .unwrap_or([0.0; 4]);
        total.map(|x| x / self.ions.len().max(1) as f64)
    }

    /// Ensemble-mean density-matrix element.
    pub fn mean_element(&self, row: LevelLabel, col: LevelLabel) -> Complex64 {
        let parts = exec::map_blocks(self.execution, &self.ions, |block| {
            block.iter().map(|ion| ion.rho.get(row, col)).sum::<Complex64>()
        });
        exec::tree_reduce(parts, |a, b| a + b).unwrap_or(ZERO) / self.ions.len().max(1) as f64
    }

    pub fn excited_fraction(&self) -> f64 {
        let p = self.mean_populations();
        p[LevelLabel::E3.index()] + p[LevelLabel::E5.index()]
    }
}

/// Per-ion random stream: the ion index selects the ChaCha stream.
fn ion_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_ensemble(
    n: usize,
    profile: &SpectralProfile,
    params: &MaterialParams,
    geometry: Geometry,
    seed: u64,
) -> Result<Ensemble, EnsembleError> {
    sample_ensemble_with(n, profile, params, geometry, seed, Execution::default())
}

pub fn sample_ensemble_with(
    n: usize,
    profile: &SpectralProfile,
    params: &MaterialParams,
    geometry: Geometry,
    seed: u64,
    execution: Execution,
) -> Result<Ensemble, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    profile.validate()?;
    let sigma_g = params.gamma13 / fwhm_per_sigma();
    let sigma_e = params.gamma35bar / fwhm_per_sigma();
    let ions = exec::map_range(execution, n, |i| {
        let mut rng = ion_rng(seed, i);
        let delta_opt = profile.sample(&mut rng);
        let delta_g = gaussian(&mut rng, sigma_g);
        let delta_e = gaussian(&mut rng, sigma_e);
        let x = rng.random::<f64>() * geometry.length;
        let y = (rng.random::<f64>() - 0.5) * geometry.waist;
        Ion { delta_opt, delta_g, delta_e, position: [x, y], rho: DensityMatrix::pure(LevelLabel::G1) }
    });
    Ok(Ensemble { ions, seed, geometry, execution })
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn wavevector(model: &Model, transition: Transition, direction: [f64; 2], geometry: &Geometry) -> [f64; 2] {
    let k = wavenumber(model.scheme().carrier(transition), geometry.refractive_index);
    [k * direction[0], k * direction[1]]
}

/// Ensembles larger than this use tabulated pulse maps.
const TABLE_MIN_IONS: usize = 2000;

fn detuning_range(ens: &Ensemble, transition: Transition) -> (f64, f64) {
    ens.ions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), ion| {
        let d = ion.detuning(transition);
        (lo.min(d), hi.max(d))
    })
}

/// Applies `pulse` at its centre time to every ion.
pub fn apply_pulse(ens: &mut Ensemble, pulse: &PulseSpec, model: &Model) -> Result<(), EnsembleError> {
    if model.scheme().line(pulse.transition).is_none() {
        return Err(EnsembleError::UnknownTransition(pulse.transition));
    }
    pulse.validate()?;
    if pulse.is_zero() {
        return Ok(());
    }
    let transition = pulse.transition;
    let propagator = if matches!(pulse.shape, PulseShape::Ideal { .. }) {
        Propagator::new(pulse, 1)
    } else {
        let (lo, hi) = detuning_range(ens, transition);
        let steps = pulseshape::converged_steps(pulse, &[lo, 0.5 * (lo + hi), hi], pulseshape::PROPAGATION_TOLERANCE)?;
        Propagator::new(pulse, 2 * steps)
    };
    let k = wavevector(model, transition, pulse.direction, &ens.geometry);
    let (lower, upper) = transition.levels();
    let (li, ui) = (lower.index(), upper.index());
    let table = if propagator.is_numeric() && ens.ions.len() > TABLE_MIN_IONS {
        let (lo, hi) = detuning_range(ens, transition);
        Some(propagator.tabulate(lo, hi, Propagator::table_step(pulse)))
    } else {
        None
    };
    exec::for_each_mut(ens.execution, &mut ens.ions, |ion| {
        let det = ion.detuning(transition);
        let base = match &table {
            Some(t) => t.map(det),
            None => propagator.map(det),
        };
        let spatial = Complex64::from_polar(1.0, k[0] * ion.position[0] + k[1] * ion.position[1]);
        let map = TransferMap([[base.0[0][0], base.0[0][1] * spatial.conj()], [base.0[1][0] * spatial, base.0[1][1]]]);
        ion.rho.apply_map(&map, li, ui);
    });
    Ok(())
}

/// Decay and dephasing rates shared by all ions during one segment.
#[derive(Debug, Clone, Copy)]
struct Rates {
    /// Optical-coherence decoherence rate, s^-1.
    gamma: f64,
    t1: f64,
    branching: f64,
}

impl Rates {
    fn new(params: &MaterialParams, excited_fraction: f64) -> Self {
        Self {
            gamma: params.gamma_opt * excited_fraction.clamp(0.0, 1.0),
            t1: params.t1_excited,
            branching: params.branching_e3_to_g3,
        }
    }

    /// Amplitude decay rate of level `i`.
    fn level_rate(&self, level: LevelLabel) -> f64 {
        if level.is_excited() {
            0.5 / self.t1
        } else {
            0.0
        }
    }

    /// Complex rate of the (row, col) coherence for `ion`: the element
    /// evolves as exp(rate * dt).
    fn coherence_rate(&self, ion: &Ion, row: LevelLabel, col: LevelLabel) -> Complex64 {
        let mut decay = self.level_rate(row) + self.level_rate(col);
        if row.is_excited() != col.is_excited() {
            decay += self.gamma;
        }
        let omega = 2.0 * PI * (ion.level_offset(row) - ion.level_offset(col));
        Complex64::new(-decay, -omega)
    }
}

fn evolve_ion(ion: &mut Ion, dt: f64, rates: &Rates) {
    let levels = LevelLabel::ALL;
    let e3 = LevelLabel::E3.index();
    let g3 = LevelLabel::G3.index();
    let lost_e3 = ion.rho.0[e3][e3].re * (1.0 - (-dt / rates.t1).exp());
    let mut factors = [[Complex64::new(1.0, 0.0); 4]; 4];
    for (j, &row) in levels.iter().enumerate() {
        for (k, &col) in levels.iter().enumerate() {
            if j <= k {
                let f = (rates.coherence_rate(ion, row, col) * dt).exp();
                factors[j][k] = f;
                factors[k][j] = f.conj();
            }
        }
    }
    for j in 0..4 {
        for k in 0..4 {
            ion.rho.0[j][k] *= factors[j][k];
        }
        ion.rho.0[j][j].im = 0.0;
    }
    ion.rho.0[g3][g3].re += rates.branching * lost_e3;
}

/// Free evolution over `dt` seconds.
///
/// The optical decoherence rate is scaled by the ensemble's excited fraction
/// at the start of the interval, so dephasing from excitation-induced
/// frequency shifts acts only while the medium is inverted.
pub fn free_evolution(ens: &mut Ensemble, dt: f64, params: &MaterialParams) {
    if !(dt > 0.0) {
        return;
    }
    let rates = Rates::new(params, ens.excited_fraction());
    exec::for_each_mut(ens.execution, &mut ens.ions, |ion| evolve_ion(ion, dt, &rates));
}

/// Emitted amplitude on one transition over a detection window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub label: String,
    pub transition: Transition,
    pub times: Vec<f64>,
    /// Phase-matched mean optical coherence (upper, lower) per grid point.
    pub amplitude: Vec<Complex64>,
    pub intensity: Vec<f64>,
    /// Trapezoidal integral of the intensity over the window, s.
    pub integrated: f64,
}

impl EmissionRecord {
    pub fn peak_time(&self) -> Option<f64> {
        let (i, _) = self.intensity.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
        Some(self.times[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,re,im,intensity\n");
        for ((t, a), i) in self.times.iter().zip(&self.amplitude).zip(&self.intensity) {
            out.push_str(&format!("{t:e},{:e},{:e},{i:e}\n", a.re, a.im));
        }
        out
    }
}

/// Emission from the ensemble's current state, taken to be the state at the
/// window start `window.start`. The ensemble itself is not advanced.
pub fn emitted_field(
    ens: &Ensemble,
    window: &DetectionWindow,
    grid_step: f64,
    model: &Model,
) -> Result<EmissionRecord, EnsembleError> {
    if !(window.end > window.start) {
        return Err(EnsembleError::EmptyWindow { start: window.start, end: window.end });
    }
    if !(grid_step > 0.0) {
        return Err(EnsembleError::InvalidGridStep);
    }
    if model.scheme().line(window.transition).is_none() {
        return Err(EnsembleError::UnknownTransition(window.transition));
    }
    let points = ((window.end - window.start) / grid_step).round().max(1.0) as usize + 1;
    let h = (window.end - window.start) / (points - 1) as f64;
    let k = wavevector(model, window.transition, window.direction, &ens.geometry);
    let rates = Rates::new(model.params(), ens.excited_fraction());
    let (lower, upper) = window.transition.levels();

    let parts = exec::map_blocks(ens.execution, &ens.ions, |block| {
        let mut acc = vec![ZERO; points];
        for ion in block {
            let c = ion.rho.get(upper, lower);
            if c == ZERO {
                continue;
            }
            let spatial = Complex64::from_polar(1.0, -(k[0] * ion.position[0] + k[1] * ion.position[1]));
            let step = (rates.coherence_rate(ion, upper, lower) * h).exp();
            let mut z = c * spatial;
            for a in acc.iter_mut() {
                *a += z;
                z *= step;
            }
        }
        acc
    });
    let n = ens.ions.len() as f64;
    let amplitude: Vec<Complex64> = exec::tree_reduce(parts, |mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    })
    .unwrap_or_else(|| vec![ZERO; points])
    .into_iter()
    .map(|a| a / n)
    .collect();
    let intensity: Vec<f64> = amplitude.iter().map(|a| a.norm_sqr()).collect();
    let integrated = crate::profile::trapezoid(&intensity, h);
    let times = (0..points).map(|i| window.start + i as f64 * h).collect();
    Ok(EmissionRecord {
        label: window.label.clone(),
        transition: window.transition,
        times,
        amplitude,
        intensity,
        integrated,
    })
}

/// Mean level populations at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSnapshot {
    pub time: f64,
    /// What just happened: `pulse <i>` or `window <label>`.
    pub event: String,
    /// Indexed like [`LevelLabel::index`].
    pub populations: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRun {
    pub records: Vec<EmissionRecord>,
    pub trace: Vec<PopulationSnapshot>,
}

impl SequenceRun {
    pub fn record(&self, label: &str) -> Option<&EmissionRecord> {
        self.records.iter().find(|r| r.label == label)
    }
}

/// Checks pulse ordering and pulse/window overlap.
pub fn check_sequence(seq: &Sequence) -> Result<(), EnsembleError> {
    for (i, pair) in seq.pulses.windows(2).enumerate() {
        if !(pair[1].center_time > pair[0].center_time) {
            return Err(EnsembleError::UnorderedPulses(i + 1));
        }
    }
    for window in &seq.windows {
        if !(window.end > window.start) {
            return Err(EnsembleError::EmptyWindow { start: window.start, end: window.end });
        }
        for (i, pulse) in seq.pulses.iter().enumerate() {
            let (a, b) = pulse.support();
            if a < window.end - TIME_TOLERANCE && b > window.start + TIME_TOLERANCE {
                return Err(EnsembleError::OverlappingPulses { pulse: i, window: window.label.clone() });
            }
        }
    }
    if !(seq.grid_step > 0.0) {
        return Err(EnsembleError::InvalidGridStep);
    }
    Ok(())
}

enum Event<'a> {
    Pulse(usize, &'a PulseSpec),
    Window(&'a DetectionWindow),
}

/// Runs the sequence on the ensemble in time order and returns one record
/// per detection window, in window order.
pub fn run_sequence(ens: &mut Ensemble, seq: &Sequence, model: &Model) -> Result<SequenceRun, EnsembleError> {
    check_sequence(seq)?;
    let mut events: Vec<(f64, Event)> = seq
        .pulses
        .iter()
        .enumerate()
        .map(|(i, p)| (p.center_time, Event::Pulse(i, p)))
        .chain(seq.windows.iter().map(|w| (w.start, Event::Window(w))))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut now = events.first().map(|e| e.0).unwrap_or(0.0);
    let mut records: Vec<(usize, EmissionRecord)> = Vec::new();
    let mut trace = Vec::new();
    for (time, event) in events {
        free_evolution(ens, time - now, model.params());
        now = time;
        match event {
            Event::Pulse(i, pulse) => {
                apply_pulse(ens, pulse, model)?;
                trace.push(PopulationSnapshot {
                    time,
                    event: format!("pulse {i}"),
                    populations: ens.mean_populations(),
                });
            }
            Event::Window(window) => {
                let index = seq.windows.iter().position(|w| std::ptr::eq(w, window)).unwrap_or(0);
                records.push((index, emitted_field(ens, window, seq.grid_step, model)?));
                trace.push(PopulationSnapshot {
                    time,
                    event: format!("window {}", window.label),
                    populations: ens.mean_populations(),
                });
            }
        }
    }
    records.sort_by_key(|r| r.0);
    Ok(SequenceRun { records: records.into_iter().map(|r| r.1).collect(), trace })
}

/// Converts integrated echo intensity into storage efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionCalibration {
    /// Efficiency per unit integrated intensity.
    pub scale: f64,
    pub reference_integral: f64,
}

impl EmissionCalibration {
    pub fn efficiency(&self, record: &EmissionRecord) -> f64 {
        self.scale * record.integrated
    }
}

/// Calibrates the emission scale on a copy of `ens`: an ideal collinear
/// two-pulse echo of `signal` on f15, without decay or decoherence, is
/// assigned the thin-absorber efficiency d^2 e^-d.
pub fn calibrate_emission(
    ens: &Ensemble,
    signal: &PulseSpec,
    window_width: f64,
    grid_step: f64,
    model: &Model,
) -> Result<EmissionCalibration, EnsembleError> {
    let d = model.params().d;
    let quiet = MaterialParams { gamma_opt: 0.0, t1_excited: f64::INFINITY, ..*model.params() };
    let quiet_model = model.with_params(quiet).expect("decay-free parameters stay valid");
    let geometry = ens.geometry.collinear();
    let t0 = signal.center_time;
    let rephase_duration = 1e-6;
    let t1 = t0 + signal.half_support() + 0.5 * window_width + rephase_duration;
    let echo = 2.0 * t1 - t0;
    let signal = PulseSpec { direction: geometry.signal_direction(), transition: Transition::F15, ..*signal };
    let pi = PulseSpec {
        transition: Transition::F15,
        center_time: t1,
        shape: PulseShape::Ideal { duration: rephase_duration },
        nominal_area: PI,
        phase: 0.0,
        direction: geometry.signal_direction(),
        role: PulseRole::Control,
    };
    let seq = Sequence {
        pulses: vec![signal, pi],
        windows: vec![DetectionWindow {
            label: "reference".into(),
            start: echo - 0.5 * window_width,
            end: echo + 0.5 * window_width,
            transition: Transition::F15,
            direction: geometry.signal_direction(),
        }],
        geometry,
        tag: ProtocolTag::Pe2,
        grid_step,
    };
    let mut copy = ens.clone();
    copy.geometry = geometry;
    copy.ions.iter_mut().for_each(|ion| ion.rho = DensityMatrix::pure(LevelLabel::G1));
    let run = run_sequence(&mut copy, &seq, &quiet_model)?;
    let reference = run.records[0].integrated;
    let scale = if reference > 0.0 { d * d * (-d).exp() / reference } else { 0.0 };
    Ok(EmissionCalibration { scale, reference_integral: reference })
}
