//! Photon-counting statistics, time-bin qubit fidelities and the classical
//! measure-and-prepare bound.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution, BLOCK};

pub const DEFAULT_BIN_WIDTH: f64 = 262e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("no counts in either bin")]
    NoCounts,
    #[error("measurement for basis '{0}' is missing")]
    MissingBasis(String),
    #[error("response probability {0} outside (0, 1]")]
    InvalidBudget(f64),
    #[error("mean photon number must be strictly positive")]
    InvalidMeanPhoton,
    #[error("at least one trial is required")]
    NoTrials,
    #[error("count model is inconsistent: {0}")]
    InvalidCountModel(String),
    #[error("qubit amplitudes are not normalized (norm^2 = {0})")]
    UnnormalizedQubit(f64),
}

/// Per-bin expectation of a counting experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModel {
    /// Start time of the first bin, s.
    pub start: f64,
    pub bin_width: f64,
    /// Fraction of the retrieved signal landing in each bin.
    pub shape: Vec<f64>,
    /// Noise photons per trial in each bin.
    pub noise: Vec<f64>,
}

impl CountModel {
    /// Uniform noise and a Gaussian echo of intensity FWHM `fwhm` centred
    /// at `center`, normalized over the bins.
    pub fn gaussian_echo(start: f64, bins: usize, bin_width: f64, center: f64, fwhm: f64, noise_per_bin: f64) -> Self {
        let sigma = fwhm / (8.0 * std::f64::consts::LN_2).sqrt();
        let raw: Vec<f64> = (0..bins)
            .map(|i| {
                let t = start + (i as f64 + 0.5) * bin_width - center;
                (-0.5 * (t / sigma).powi(2)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Self { start, bin_width, shape: raw.iter().map(|x| x / total).collect(), noise: vec![noise_per_bin; bins] }
    }

    pub fn bins(&self) -> usize {
        self.shape.len()
    }

    pub fn means(&self, mu: f64, eta: f64) -> Vec<f64> {
        self.shape.iter().zip(&self.noise).map(|(s, n)| mu * eta * s + n).collect()
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        if self.shape.len() != self.noise.len() {
            return Err(AnalysisError::InvalidCountModel("shape and noise lengths differ".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(AnalysisError::InvalidCountModel("bin width must be positive".into()));
        }
        if self.shape.iter().chain(&self.noise).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(AnalysisError::InvalidCountModel("negative or non-finite bin mean".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Per-bin sum over trials of the squared per-trial count.
    pub squares: Vec<u64>,
    pub trials: u64,
    pub with_input: bool,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts_in(&self, bins: std::ops::Range<usize>) -> u64 {
        self.counts[bins].iter().sum()
    }

    pub fn mean(&self, bin: usize) -> f64 {
        self.counts[bin] as f64 / self.trials as f64
    }

    /// Unbiased per-trial variance of one bin.
    pub fn variance(&self, bin: usize) -> f64 {
        let n = self.trials as f64;
        let m = self.mean(bin);
        if self.trials < 2 {
            return 0.0;
        }
        (self.squares[bin] as f64 - n * m * m) / (n - 1.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,counts\n");
        for (edge, c) in self.edges.iter().zip(&self.counts) {
            let _ = writeln!(out, "{edge:.9e},{c}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramMeta {
    pub mu: f64,
    pub eta: f64,
    pub trials: u64,
    pub seed: u64,
}

/// Poisson photon counts over independent trials; trial `i` draws from the
/// RNG stream `i` of `seed`.
pub fn simulate_counts(
    model: &CountModel,
    mu: f64,
    eta: f64,
    trials: u64,
    seed: u64,
    execution: Execution,
) -> Result<Histogram, AnalysisError> {
    if trials == 0 {
        return Err(AnalysisError::NoTrials);
    }
    model.validate()?;
    let means = model.means(mu.max(0.0), eta.max(0.0));
    let dists: Vec<Option<Poisson<f64>>> = means.iter().map(|&m| Poisson::new(m).ok()).collect();
    let bins = means.len();
    let blocks = (trials as usize).div_ceil(BLOCK);
    let partial = exec::map_range(execution, blocks, |b| {
        let mut counts = vec![0u64; bins];
        let mut squares = vec![0u64; bins];
        let first = (b * BLOCK) as u64;
        let last = (first + BLOCK as u64).min(trials);
        for trial in first..last {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial);
            for (k, dist) in dists.iter().enumerate() {
                if let Some(dist) = dist {
                    let c = dist.sample(&mut rng) as u64;
                    counts[k] += c;
                    squares[k] += c * c;
                }
            }
        }
        (counts, squares)
    });
    let (counts, squares) = exec::tree_reduce(partial, |mut a, b| {
        for k in 0..bins {
            a.0[k] += b.0[k];
            a.1[k] += b.1[k];
        }
        a
    })
    .unwrap_or_default();
    let edges = (0..=bins).map(|i| model.start + i as f64 * model.bin_width).collect();
    Ok(Histogram { bin_width: model.bin_width, edges, counts, squares, trials, with_input: mu * eta > 0.0 })
}

/// SNR in `bins` from a run with input and one without.
pub fn empirical_snr(with_input: &Histogram, without_input: &Histogram, bins: std::ops::Range<usize>) -> f64 {
    let noise = without_input.counts_in(bins.clone()) as f64;
    let signal = with_input.counts_in(bins) as f64 - noise;
    signal / noise
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Early,
    Late,
}

/// Fidelity of an |e> or |l> input from the counts in both bins.
pub fn fidelity_basis(counts_early: u64, counts_late: u64, which: Basis) -> Result<f64, AnalysisError> {
    let (correct, wrong) = match which {
        Basis::Early => (counts_early, counts_late),
        Basis::Late => (counts_late, counts_early),
    };
    if correct + wrong == 0 {
        return Err(AnalysisError::NoCounts);
    }
    // S = correct - N and N = wrong, so (S + N)/(S + 2N) = correct/(correct + wrong)
    Ok(correct as f64 / (correct + wrong) as f64)
}

pub fn fidelity_from_snr(snr: f64) -> f64 {
    (snr + 1.0) / (snr + 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBinQubit {
    pub delta_t: f64,
    /// Relative phase of the late bin.
    pub phase1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
}

impl TimeBinQubit {
    pub fn new(alpha: f64, beta: f64, phase1: f64, delta_t: f64, mu: f64) -> Result<Self, AnalysisError> {
        let norm = alpha * alpha + beta * beta;
        if (norm - 1.0).abs() > 1e-12 {
            return Err(AnalysisError::UnnormalizedQubit(norm));
        }
        if !(mu >= 0.0) {
            return Err(AnalysisError::InvalidMeanPhoton);
        }
        Ok(Self { delta_t, phase1, alpha, beta, mu })
    }

    pub fn early(delta_t: f64, mu: f64) -> Self {
        Self { delta_t, phase1: 0.0, alpha: 1.0, beta: 0.0, mu }
    }

    pub fn late(delta_t: f64, mu: f64) -> Self {
        Self { delta_t, phase1: 0.0, alpha: 0.0, beta: 1.0, mu }
    }

    /// (|e> + e^{i phase1}|l>)/sqrt(2).
    pub fn superposition(phase1: f64, delta_t: f64, mu: f64) -> Self {
        Self { delta_t, phase1, alpha: 0.5f64.sqrt(), beta: 0.5f64.sqrt(), mu }
    }
}

/// Expected photons in the three readout bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCounts {
    /// |ee>
    pub early: f64,
    /// |el> + |le>
    pub middle: f64,
    /// |ll>
    pub late: f64,
}

/// Readout through two pi/2 pulses separated by the bin delay.
pub fn temporal_beamsplitter_readout(qubit: &TimeBinQubit, phase2: f64, eta: f64, noise: f64) -> ReadoutCounts {
    let flux = qubit.mu * eta;
    let interfering = Complex64::new(qubit.alpha, 0.0) + Complex64::from_polar(qubit.beta, qubit.phase1 - phase2);
    ReadoutCounts {
        early: 0.25 * flux * qubit.alpha * qubit.alpha + noise,
        middle: 0.25 * flux * interfering.norm_sqr() + noise,
        late: 0.25 * flux * qubit.beta * qubit.beta + noise,
    }
}

/// Middle-bin counts against the readout phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fringe {
    pub phases: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Fringe {
    /// (C_max, C_min): from a least-squares sinusoid when at least three
    /// distinct phases are present, otherwise the raw extremes.
    pub fn extrema(&self) -> Option<(f64, f64)> {
        if self.counts.is_empty() || self.phases.len() != self.counts.len() {
            return None;
        }
        if self.phases.len() >= 3 {
            let design = nalgebra::DMatrix::from_fn(self.phases.len(), 3, |i, j| match j {
                0 => 1.0,
                1 => self.phases[i].cos(),
                _ => self.phases[i].sin(),
            });
            let y = nalgebra::DVector::from_column_slice(&self.counts);
            let svd = design.svd(true, true);
            if svd.rank(1e-9) == 3 {
                if let Ok(fit) = svd.solve(&y, 1e-12) {
                    let amp = fit[1].hypot(fit[2]);
                    return Some((fit[0] + amp, (fit[0] - amp).max(0.0)));
                }
            }
        }
        let max = self.counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.counts.iter().cloned().fold(f64::INFINITY, f64::min);
        Some((max, min))
    }
}

pub fn visibility(c_max: f64, c_min: f64) -> f64 {
    if c_max + c_min > 0.0 {
        (c_max - c_min) / (c_max + c_min)
    } else {
        0.0
    }
}

/// Early and late bin counts for one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinCounts {
    pub early: u64,
    pub late: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QubitMeasurements {
    pub early: Option<BinCounts>,
    pub late: Option<BinCounts>,
    pub plus: Option<Fringe>,
    pub plus_i: Option<Fringe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityErrors {
    pub f_e: f64,
    pub f_l: f64,
    pub f_plus: f64,
    pub f_plus_i: f64,
    pub f_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub f_e: f64,
    pub f_l: f64,
    pub f_plus: f64,
    pub f_plus_i: f64,
    pub f_el: f64,
    pub f_pm: f64,
    pub f_avg: f64,
    /// Visibilities of the + and +i fringes.
    pub visibilities: [f64; 2],
    /// Correct over wrong bin counts for |e> and |l>.
    pub snr: [f64; 2],
    pub errors: FidelityErrors,
}

fn basis_error(correct: f64, wrong: f64) -> f64 {
    (correct * wrong / (correct + wrong).powi(3)).sqrt()
}

fn fringe_error(c_max: f64, c_min: f64) -> f64 {
    // sigma_F = sigma_V / 2
    0.5 * (4.0 * c_max * c_min / (c_max + c_min).powi(3)).sqrt()
}

pub fn fidelity_report(m: &QubitMeasurements) -> Result<FidelityReport, AnalysisError> {
    let early = m.early.ok_or_else(|| AnalysisError::MissingBasis("e".into()))?;
    let late = m.late.ok_or_else(|| AnalysisError::MissingBasis("l".into()))?;
    let missing = |name: &str| AnalysisError::MissingBasis(name.into());
    let (pmax, pmin) = m.plus.as_ref().and_then(Fringe::extrema).ok_or_else(|| missing("+"))?;
    let (imax, imin) = m.plus_i.as_ref().and_then(Fringe::extrema).ok_or_else(|| missing("+i"))?;

    let f_e = fidelity_basis(early.early, early.late, Basis::Early)?;
    let f_l = fidelity_basis(late.early, late.late, Basis::Late)?;
    let v_plus = visibility(pmax, pmin);
    let v_plus_i = visibility(imax, imin);
    let f_plus = 0.5 * (v_plus + 1.0);
    let f_plus_i = 0.5 * (v_plus_i + 1.0);
    let f_el = 0.5 * (f_e + f_l);
    let f_pm = 0.5 * (f_plus + f_plus_i);
    let f_avg = f_el / 3.0 + 2.0 * f_pm / 3.0;

    let e = FidelityErrors {
        f_e: basis_error(early.early as f64, early.late as f64),
        f_l: basis_error(late.late as f64, late.early as f64),
        f_plus: fringe_error(pmax, pmin),
        f_plus_i: fringe_error(imax, imin),
        f_avg: 0.0,
    };
    let s_el = 0.5 * e.f_e.hypot(e.f_l);
    let s_pm = 0.5 * e.f_plus.hypot(e.f_plus_i);
    let errors = FidelityErrors { f_avg: (s_el / 3.0).hypot(2.0 * s_pm / 3.0), ..e };

    Ok(FidelityReport {
        f_e,
        f_l,
        f_plus,
        f_plus_i,
        f_el,
        f_pm,
        f_avg,
        visibilities: [v_plus, v_plus_i],
        snr: [early.early as f64 / early.late as f64, late.late as f64 / late.early as f64],
        errors,
    })
}

/// Settings of a simulated qubit-storage run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitRun {
    pub mu: f64,
    /// Storage efficiency into one readout bin pair.
    pub eta: f64,
    /// Noise photons per trial in each readout bin.
    pub noise_per_bin: f64,
    pub trials: u64,
    /// Readout phases sampled per fringe.
    pub phase_points: usize,
    pub delta_t: f64,
}

/// Poisson-sampled readouts of |e>, |l>, |e>+|l> and |e>+i|l>.
pub fn simulate_qubit_measurements(
    run: &QubitRun,
    seed: u64,
    execution: Execution,
) -> Result<QubitMeasurements, AnalysisError> {
    if !(run.mu > 0.0) {
        return Err(AnalysisError::InvalidMeanPhoton);
    }
    let readout_hist = |r: ReadoutCounts, stream: u64| {
        let model = CountModel {
            start: 0.0,
            bin_width: run.delta_t,
            shape: vec![0.0; 3],
            noise: vec![r.early, r.middle, r.late],
        };
        simulate_counts(&model, 0.0, 0.0, run.trials, seed.wrapping_add(stream), execution)
    };
    let basis = |qubit: TimeBinQubit, stream: u64| -> Result<BinCounts, AnalysisError> {
        let h = readout_hist(temporal_beamsplitter_readout(&qubit, 0.0, run.eta, run.noise_per_bin), stream)?;
        Ok(BinCounts { early: h.counts[0], late: h.counts[2] })
    };
    let fringe = |phase1: f64, stream: u64| -> Result<Fringe, AnalysisError> {
        let qubit = TimeBinQubit::superposition(phase1, run.delta_t, run.mu);
        let phases: Vec<f64> = (0..run.phase_points).map(|i| 2.0 * PI * i as f64 / run.phase_points as f64).collect();
        let mut counts = Vec::with_capacity(phases.len());
        for (i, &phase2) in phases.iter().enumerate() {
            let r = temporal_beamsplitter_readout(&qubit, phase2, run.eta, run.noise_per_bin);
            counts.push(readout_hist(r, stream + i as u64)?.counts[1] as f64);
        }
        Ok(Fringe { phases, counts })
    };
    let points = run.phase_points as u64;
    Ok(QubitMeasurements {
        early: Some(basis(TimeBinQubit::early(run.delta_t, run.mu), 0)?),
        late: Some(basis(TimeBinQubit::late(run.delta_t, run.mu), 1)?),
        plus: Some(fringe(0.0, 2)?),
        plus_i: Some(fringe(0.5 * PI, 2 + points)?),
    })
}

/// Response budget that reproduces the 0.880 classical limit at mu = 2.29.
pub const CALIBRATED_RESPONSE_PROB: f64 = 0.030_094_216_266;

fn poisson_pmf(mu: f64, n: usize) -> f64 {
    let mut p = (-mu).exp();
    for k in 1..=n {
        p *= mu / k as f64;
    }
    p
}

fn per_event_fidelity(n: usize) -> f64 {
    (n as f64 + 1.0) / (n as f64 + 2.0)
}

/// Greedy threshold allocation over photon numbers `0..=n_max`.
fn threshold_strategy(mu: f64, budget: f64, n_max: usize) -> f64 {
    let mut remaining = budget;
    let mut weighted = 0.0;
    for n in (0..=n_max).rev() {
        if remaining <= 0.0 {
            break;
        }
        let take = poisson_pmf(mu, n).min(remaining);
        weighted += take * per_event_fidelity(n);
        remaining -= take;
    }
    weighted / (budget - remaining.max(0.0))
}

/// Tail beyond which Poisson weights are negligible at `mu`.
fn photon_cutoff(mu: f64) -> usize {
    (mu + 12.0 * mu.sqrt() + 40.0).ceil() as usize
}

/// Best average fidelity of a measure-and-prepare device that answers with
/// total probability `response_prob`.
pub fn classical_bound(mu: f64, response_prob: f64) -> Result<f64, AnalysisError> {
    if !(mu > 0.0) {
        return Err(AnalysisError::InvalidMeanPhoton);
    }
    if !(response_prob > 0.0 && response_prob <= 1.0) {
        return Err(AnalysisError::InvalidBudget(response_prob));
    }
    Ok(threshold_strategy(mu, response_prob, photon_cutoff(mu)))
}

/// Greedy optimum restricted to photon numbers `0..=n_max`.
pub fn classical_bound_truncated(mu: f64, response_prob: f64, n_max: usize) -> f64 {
    threshold_strategy(mu, response_prob, n_max)
}

/// Exhaustive search over the vertices of the response polytope
/// {0 <= r_n <= 1, sum p_n r_n = budget} for photon numbers `0..=n_max`.
pub fn classical_bound_brute_force(mu: f64, response_prob: f64, n_max: usize) -> Option<f64> {
    let p: Vec<f64> = (0..=n_max).map(|n| poisson_pmf(mu, n)).collect();
    let f: Vec<f64> = (0..=n_max).map(per_event_fidelity).collect();
    let m = p.len();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let (mut mass, mut num) = (0.0, 0.0);
        for k in 0..m {
            if mask & (1 << k) != 0 {
                mass += p[k];
                num += p[k] * f[k];
            }
        }
        let mut consider = |value: f64| best = Some(best.map_or(value, |b: f64| b.max(value)));
        let residual = response_prob - mass;
        if residual.abs() <= 1e-15 {
            consider(num / response_prob);
            continue;
        }
        if residual < 0.0 {
            continue;
        }
        for k in 0..m {
            if mask & (1 << k) == 0 && residual <= p[k] {
                consider((num + residual * f[k]) / response_prob);
            }
        }
    }
    best
}

/// Budget with `classical_bound(mu, budget) = target`, by bisection.
pub fn calibrate_response_prob(mu: f64, target: f64) -> Result<f64, AnalysisError> {
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if classical_bound(mu, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn window_model(noise_per_window: f64) -> CountModel {
        CountModel::gaussian_echo(0.0, 6, DEFAULT_BIN_WIDTH, 3.0 * DEFAULT_BIN_WIDTH, 0.8e-6, noise_per_window / 6.0)
    }

    #[test]
    fn zero_input_zero_noise_is_empty() {
        let h = simulate_counts(&window_model(0.0), 0.0, 0.1, 1000, 3, Execution::Sequential).unwrap();
        assert_eq!(h.total(), 0);
        assert!(!h.with_input);
        assert_eq!(h.edges.len(), 7);
    }

    #[test]
    fn zero_trials_rejected() {
        assert_eq!(
            simulate_counts(&window_model(0.0), 1.0, 0.1, 0, 3, Execution::Sequential),
            Err(AnalysisError::NoTrials)
        );
    }

    #[test]
    fn total_counts_match_poisson_sum() {
        let model = window_model(1.76e-3);
        let (mu, eta, trials) = (1.17, 0.064, 50_000u64);
        let h = simulate_counts(&model, mu, eta, trials, 11, Execution::default()).unwrap();
        let expected = trials as f64 * (mu * eta + 1.76e-3);
        assert!((h.total() as f64 - expected).abs() < 3.0 * expected.sqrt());
    }

    #[test]
    fn counts_are_seed_deterministic() {
        let model = window_model(1e-2);
        let a = simulate_counts(&model, 1.0, 0.5, 3000, 5, Execution::Sequential).unwrap();
        let b = simulate_counts(&model, 1.0, 0.5, 3000, 5, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn basis_fidelity_examples() {
        assert_eq!(fidelity_basis(100, 0, Basis::Early).unwrap(), 1.0);
        assert_eq!(fidelity_basis(40, 40, Basis::Late).unwrap(), 0.5);
        assert_relative_eq!(fidelity_from_snr(14.4), 0.939, epsilon = 5e-4);
        assert_eq!(fidelity_basis(0, 0, Basis::Early), Err(AnalysisError::NoCounts));
        // S/N = 14.4 as counts: N = 10, S = 144
        assert_relative_eq!(fidelity_basis(154, 10, Basis::Early).unwrap(), fidelity_from_snr(14.4), epsilon = 1e-12);
    }

    #[test]
    fn beamsplitter_interference() {
        let q = TimeBinQubit::superposition(0.3, 1e-6, 2.0);
        let on = temporal_beamsplitter_readout(&q, 0.3, 0.5, 0.0);
        let off = temporal_beamsplitter_readout(&q, 0.3 + PI, 0.5, 0.0);
        assert!(off.middle.abs() < 1e-15);
        // constructive middle bin carries twice the outer bins together
        assert_relative_eq!(on.middle, 2.0 * (on.early + on.late), epsilon = 1e-12);
        for k in 0..16 {
            let phase = k as f64 * 0.4;
            assert!(temporal_beamsplitter_readout(&q, phase, 0.5, 0.0).middle <= on.middle + 1e-15);
        }
    }

    #[test]
    fn noiseless_fringe_has_unit_visibility() {
        let q = TimeBinQubit::superposition(0.5 * PI, 1e-6, 2.29);
        let phases: Vec<f64> = (0..12).map(|i| 2.0 * PI * i as f64 / 12.0).collect();
        let counts = phases.iter().map(|&p| temporal_beamsplitter_readout(&q, p, 0.05, 0.0).middle).collect();
        let (cmax, cmin) = Fringe { phases, counts }.extrema().unwrap();
        assert!((visibility(cmax, cmin) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn plus_fidelity_from_visibility() {
        assert_relative_eq!(0.5 * (0.918 + 1.0), 0.959, epsilon = 1e-12);
        let fringe = Fringe { phases: vec![0.0, PI], counts: vec![959.0, 41.0] };
        let (a, b) = fringe.extrema().unwrap();
        assert_relative_eq!(visibility(a, b), 0.918, epsilon = 1e-12);
    }

    #[test]
    fn qubit_unnormalized_rejected() {
        assert!(matches!(TimeBinQubit::new(1.0, 0.1, 0.0, 1e-6, 1.0), Err(AnalysisError::UnnormalizedQubit(_))));
        assert!(TimeBinQubit::new(0.6, 0.8, 0.0, 1e-6, 1.0).is_ok());
    }

    fn table_counts() -> QubitMeasurements {
        QubitMeasurements {
            early: Some(BinCounts { early: 939, late: 61 }),
            late: Some(BinCounts { early: 30, late: 970 }),
            plus: Some(Fringe { phases: vec![0.0, PI], counts: vec![959.0, 41.0] }),
            plus_i: Some(Fringe { phases: vec![0.5 * PI, 1.5 * PI], counts: vec![942.0, 58.0] }),
        }
    }

    #[test]
    fn report_from_table_counts() {
        let r = fidelity_report(&table_counts()).unwrap();
        assert_relative_eq!(r.f_e, 0.939, epsilon = 1e-12);
        assert_relative_eq!(r.f_l, 0.970, epsilon = 1e-12);
        assert_relative_eq!(r.f_plus, 0.959, epsilon = 1e-12);
        assert_relative_eq!(r.f_plus_i, 0.942, epsilon = 1e-12);
        assert_relative_eq!(r.f_avg, 0.95183, epsilon = 1e-5);
        assert!(r.errors.f_avg > 0.0 && r.errors.f_avg < 0.05);
    }

    #[test]
    fn report_needs_every_basis() {
        let mut m = table_counts();
        m.plus_i = None;
        assert_eq!(fidelity_report(&m), Err(AnalysisError::MissingBasis("+i".into())));
    }

    #[test]
    fn ideal_inputs_give_unit_fidelity() {
        let m = QubitMeasurements {
            early: Some(BinCounts { early: 500, late: 0 }),
            late: Some(BinCounts { early: 0, late: 500 }),
            plus: Some(Fringe { phases: vec![0.0, PI], counts: vec![800.0, 0.0] }),
            plus_i: Some(Fringe { phases: vec![0.0, PI], counts: vec![800.0, 0.0] }),
        };
        assert_eq!(fidelity_report(&m).unwrap().f_avg, 1.0);
    }

    #[test]
    fn classical_bound_limits() {
        // budget covering exactly N >= 10
        let tail: f64 = (10..80).map(|n| poisson_pmf(2.29, n)).sum();
        assert!(classical_bound(2.29, tail).unwrap() >= 11.0 / 12.0);
        let mu: f64 = 1e-4;
        let single = 1.0 - (-mu).exp();
        assert!((classical_bound(mu, single).unwrap() - 2.0 / 3.0).abs() < 1e-4);
        assert!(matches!(classical_bound(1.0, 0.0), Err(AnalysisError::InvalidBudget(_))));
        assert!(matches!(classical_bound(1.0, 1.5), Err(AnalysisError::InvalidBudget(_))));
    }

    #[test]
    fn threshold_matches_brute_force() {
        for &mu in &[0.3, 1.0, 2.29, 5.0] {
            let total: f64 = (0..=12).map(|n| poisson_pmf(mu, n)).sum();
            for &frac in &[0.01, 0.1, 0.37, 0.8, 1.0] {
                let budget = frac * total;
                let greedy = classical_bound_truncated(mu, budget, 12);
                let brute = classical_bound_brute_force(mu, budget, 12).unwrap();
                assert!((greedy - brute).abs() < 1e-9, "mu={mu} budget={budget}: {greedy} vs {brute}");
            }
        }
    }

    #[test]
    fn frozen_budget_reproduces_limit() {
        let f = classical_bound(2.29, CALIBRATED_RESPONSE_PROB).unwrap();
        assert!((f - 0.880).abs() < 5e-3, "{f}");
    }
}
