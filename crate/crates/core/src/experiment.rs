//! Config-driven experiment runner: TOML in, CSV/JSON artifacts and a
//! hashed manifest out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, CountModel, QubitRun};
use crate::exec::Execution;
use crate::ionensemble::{self, EmissionCalibration, Geometry, SequenceRun};
use crate::noisebudget::{self, NoiseBudget, NoiseSettings};
use crate::physmodel::{validate_model, LevelScheme, MaterialParams, Model};
use crate::profile::SpectralProfile;
use crate::protocols::{self, DecayCurve, DecayVariable, NlpeTimings, PulseSet, Sequence, VariantKind};
use crate::pulseshape::PulseShape;
use crate::specprep;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid config at '{key}': {reason}")]
    ConfigInvalid { key: String, reason: String },
    #[error("i/o failure at '{path}': {reason}")]
    IoFailure { path: String, reason: String },
    #[error("unknown sweep variable '{0}'")]
    UnknownVariable(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
}

impl ExperimentError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::ConfigInvalid { .. } => "CONFIG_INVALID",
            ExperimentError::IoFailure { .. } => "IO_FAILURE",
            ExperimentError::UnknownVariable(_) => "UNKNOWN_VARIABLE",
            ExperimentError::Simulation(_) => "SIMULATION_FAILED",
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::ConfigInvalid { key: key.to_string(), reason: reason.into() }
}

fn sim_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Simulation(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Nlpe,
    Pe2,
    Fle4,
    Rose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub protocol: Protocol,
    /// Pulse centre times, s (signal first).
    pub times: Vec<f64>,
    pub eta_control: f64,
    /// Controls along the signal direction.
    pub collinear: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Nlpe,
            times: NlpeTimings::reference().as_array().to_vec(),
            eta_control: 0.938,
            collinear: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    /// Gaussian of `fwhm` around the line centre.
    Gaussian,
    /// Profile left by the default spectral preparation.
    Prepared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Zero skips the Monte-Carlo and uses analytic efficiencies only.
    pub ions: usize,
    pub profile: ProfileSource,
    pub fwhm: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { ions: 0, profile: ProfileSource::Gaussian, fwhm: 700e3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Echo,
    Decay,
    Qubit,
    RoseComparison,
    Afc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub variable: DecayVariable,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QubitConfig {
    /// Separation of the two qubit bins, s.
    pub delta_t: f64,
    pub phase_points: usize,
    /// Spacing between the two pi13 pulses, s.
    pub pi13_spacing: f64,
}

impl Default for QubitConfig {
    fn default() -> Self {
        Self { delta_t: 1.0e-6, phase_points: 12, pi13_spacing: 13e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kind: RunKind,
    pub trials: u64,
    pub seed: u64,
    pub bin_width: f64,
    pub mu: f64,
    /// Width of the readout window used for counting, s.
    pub readout_window: f64,
    /// Share of the full echo efficiency falling in the readout window.
    pub window_fraction: f64,
    pub decay: Option<DecayConfig>,
    pub qubit: QubitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: RunKind::Echo,
            trials: 50_000,
            seed: 1,
            bin_width: analysis::DEFAULT_BIN_WIDTH,
            mu: 1.17,
            readout_window: 1.57e-6,
            window_fraction: 0.64,
            decay: None,
            qubit: QubitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: None, formats: vec![Format::Csv, Format::Json] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub model: MaterialParams,
    #[serde(default)]
    pub scheme: Option<LevelScheme>,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub pulses: PulseSet,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| invalid(&toml_key(&e), e.message()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self, ExperimentError> {
        let config: Self = value.try_into().map_err(|e: toml::de::Error| invalid(&toml_key(&e), e.message()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<Model, ExperimentError> {
        let scheme = self.scheme.clone().unwrap_or_default();
        validate_model(&scheme, &self.model).map_err(|errors| {
            let reason = errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            invalid("model", reason)
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model()?;
        let run = &self.run;
        if run.trials == 0 {
            return Err(invalid("run.trials", "must be at least 1"));
        }
        if !(run.mu >= 0.0) {
            return Err(invalid("run.mu", "must be nonnegative"));
        }
        if !(run.bin_width > 0.0) {
            return Err(invalid("run.bin_width", "must be positive"));
        }
        if !(run.readout_window >= run.bin_width) {
            return Err(invalid("run.readout_window", "must cover at least one bin"));
        }
        if !(0.0..=1.0).contains(&run.window_fraction) {
            return Err(invalid("run.window_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sequence.eta_control) {
            return Err(invalid("sequence.eta_control", "must lie in [0, 1]"));
        }
        let needed = match self.sequence.protocol {
            Protocol::Nlpe => 5,
            Protocol::Pe2 => 2,
            Protocol::Fle4 | Protocol::Rose => 3,
        };
        if self.sequence.times.len() != needed {
            return Err(invalid("sequence.times", format!("expected {needed} pulse times")));
        }
        if !self.sequence.times.windows(2).all(|w| w[1] > w[0]) {
            return Err(invalid("sequence.times", "pulse times must increase"));
        }
        if !(self.ensemble.fwhm > 0.0) {
            return Err(invalid("ensemble.fwhm", "must be positive"));
        }
        if run.kind == RunKind::Decay {
            let decay = run.decay.ok_or_else(|| invalid("run.decay", "required for decay runs"))?;
            if decay.points == 0 || !(decay.stop >= decay.start) || !(decay.start > 0.0) {
                return Err(invalid("run.decay", "need a positive, nonempty delay grid"));
            }
        }
        if run.kind == RunKind::Qubit && run.qubit.phase_points < 3 {
            return Err(invalid("run.qubit.phase_points", "need at least three phases"));
        }
        if matches!(run.kind, RunKind::Decay | RunKind::Qubit) && self.sequence.protocol != Protocol::Nlpe {
            return Err(invalid("sequence.protocol", "decay and qubit runs need the nlpe sequence"));
        }
        Ok(())
    }

    fn geometry(&self) -> Geometry {
        if self.sequence.collinear {
            self.geometry.collinear()
        } else {
            self.geometry
        }
    }

    fn nlpe_timings(&self) -> Option<NlpeTimings> {
        (self.sequence.protocol == Protocol::Nlpe).then(|| {
            let t = &self.sequence.times;
            NlpeTimings::from_array([t[0], t[1], t[2], t[3], t[4]])
        })
    }

    pub fn build_sequence(&self) -> Result<Sequence, ExperimentError> {
        let g = self.geometry();
        let built = match self.sequence.protocol {
            Protocol::Nlpe => protocols::build_nlpe(&self.nlpe_timings().expect("nlpe"), &self.pulses, &g),
            Protocol::Pe2 => protocols::build_variant(VariantKind::Pe2, &self.sequence.times, &self.pulses, &g),
            Protocol::Fle4 => protocols::build_variant(VariantKind::Fle4, &self.sequence.times, &self.pulses, &g),
            Protocol::Rose => protocols::build_variant(VariantKind::Rose, &self.sequence.times, &self.pulses, &g),
        };
        built.map_err(|e| invalid("sequence.times", e.to_string()))
    }

    pub fn profile(&self) -> Result<SpectralProfile, ExperimentError> {
        match self.ensemble.profile {
            ProfileSource::Gaussian => Ok(SpectralProfile::gaussian(self.ensemble.fwhm)),
            ProfileSource::Prepared => {
                let pop = specprep::run_preparation(
                    &specprep::SpectralPopulation::reference_default(),
                    &specprep::reference_schedule(),
                    &specprep::PumpModel::default(),
                )
                .map_err(sim_err)?;
                specprep::prepared_profile(&pop, self.ensemble.fwhm).map_err(sim_err)
            }
        }
    }
}

fn toml_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown fields as "unknown field `x`"
    match msg.split('`').nth(1) {
        Some(field) if msg.starts_with("unknown field") => field.to_string(),
        _ => "config".to_string(),
    }
}

/// Outcome of a Monte-Carlo echo simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoOutcome {
    pub run: SequenceRun,
    pub calibration: EmissionCalibration,
    /// Efficiency of each detection window, in window order.
    pub efficiency: Vec<f64>,
    pub peak_time: Option<f64>,
}

/// Samples an ensemble, calibrates the emission scale and runs `sequence`.
pub fn simulate_echo(
    model: &Model,
    sequence: &Sequence,
    pulses: &PulseSet,
    profile: &SpectralProfile,
    ions: usize,
    seed: u64,
    execution: Execution,
) -> Result<EchoOutcome, ExperimentError> {
    let ensemble = ionensemble::sample_ensemble_with(ions, profile, model.params(), sequence.geometry, seed, execution)
        .map_err(sim_err)?;
    let signal = sequence.pulses[0];
    let calibration =
        ionensemble::calibrate_emission(&ensemble, &signal, pulses.window_width, sequence.grid_step, model)
            .map_err(sim_err)?;
    let mut ensemble = ensemble;
    let run = ionensemble::run_sequence(&mut ensemble, sequence, model).map_err(sim_err)?;
    let efficiency = run.records.iter().map(|r| calibration.efficiency(r)).collect();
    let peak_time = run.records.first().and_then(|r| r.peak_time());
    Ok(EchoOutcome { run, calibration, efficiency, peak_time })
}

/// NLPE timings for one point of a decay sweep. `Tau2` moves t4;
/// `Tau3` moves t3 and t4 together, keeping t4 - t3.
pub fn decay_timings(variable: DecayVariable, delay: f64, base: &NlpeTimings) -> NlpeTimings {
    match variable {
        DecayVariable::Tau2 => NlpeTimings { t4: base.t1 + delay, ..*base },
        DecayVariable::Tau3 => {
            let t3 = base.t2 + 0.5 * delay;
            NlpeTimings { t3, t4: t3 + (base.t4 - base.t3), ..*base }
        }
    }
}

/// Monte-Carlo decay curve; every point reuses the same ensemble draw.
#[allow(clippy::too_many_arguments)]
pub fn mc_decay_curve(
    model: &Model,
    pulses: &PulseSet,
    geometry: &Geometry,
    profile: &SpectralProfile,
    variable: DecayVariable,
    grid: &[f64],
    base: &NlpeTimings,
    ions: usize,
    seed: u64,
    execution: Execution,
) -> Result<DecayCurve, ExperimentError> {
    let mut efficiency = Vec::with_capacity(grid.len());
    for &delay in grid {
        let timings = decay_timings(variable, delay, base);
        let seq = protocols::build_nlpe(&timings, pulses, geometry).map_err(sim_err)?;
        let outcome = simulate_echo(model, &seq, pulses, profile, ions, seed, execution)?;
        efficiency.push(outcome.efficiency[0]);
    }
    Ok(DecayCurve { variable, delays: grid.to_vec(), efficiency })
}

/// File produced by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub kind: Option<RunKind>,
    pub echo_time: Option<f64>,
    /// Analytic storage efficiency.
    pub efficiency: Option<f64>,
    pub efficiency_mc: Option<f64>,
    pub snr: Option<f64>,
    pub f_avg: Option<f64>,
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
}

impl Summary {
    pub fn line(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.echo_time {
            parts.push(format!("echo at {:.2} us", t * 1e6));
        }
        if let Some(e) = self.eta() {
            parts.push(format!("eta = {:.1}%", e * 100.0));
        }
        if let Some(v) = self.snr {
            parts.push(format!("SNR = {v:.1}"));
        }
        if let Some(f) = self.f_avg {
            parts.push(format!("F_avg = {:.1}%", f * 100.0));
        }
        parts.extend(self.values.iter().map(|(k, v)| format!("{k} = {v:.4e}")));
        format!("{}: {}", self.name, parts.join(", "))
    }

    /// Efficiency used for sweeps: Monte-Carlo when available.
    pub fn eta(&self) -> Option<f64> {
        self.efficiency_mc.or(self.efficiency)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: Summary,
    pub artifacts: Vec<Artifact>,
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Runs the configured experiment in memory.
pub fn run_experiment(config: &ExperimentConfig, execution: Execution) -> Result<Outcome, ExperimentError> {
    config.validate()?;
    let model = config.model()?;
    let mut summary = Summary { name: config.name.clone(), kind: Some(config.run.kind), ..Summary::default() };
    let mut artifacts = Vec::new();
    match config.run.kind {
        RunKind::Echo => run_echo(config, &model, execution, &mut summary, &mut artifacts)?,
        RunKind::Decay => run_decay(config, &model, execution, &mut summary, &mut artifacts)?,
        RunKind::Qubit => run_qubit(config, &model, execution, &mut summary, &mut artifacts)?,
        RunKind::RoseComparison => run_rose(config, &model, &mut summary, &mut artifacts),
        RunKind::Afc => run_afc(config, &mut summary, &mut artifacts),
    }
    artifacts.push(Artifact { name: "summary.json".into(), contents: json(&summary) });
    let formats = &config.output.formats;
    artifacts.retain(|a| {
        let format = if a.name.ends_with(".csv") { Format::Csv } else { Format::Json };
        a.name == "summary.json" || formats.contains(&format)
    });
    Ok(Outcome { summary, artifacts })
}

/// Budget for a fully inverted medium after the first pi13.
fn analytic_budget(config: &ExperimentConfig, model: &Model, timings: &NlpeTimings) -> NoiseBudget {
    noisebudget::budget_from_populations(1.0, timings.optical_storage(), "echo", model.params(), &config.noise)
}

fn run_echo(
    config: &ExperimentConfig,
    model: &Model,
    execution: Execution,
    summary: &mut Summary,
    artifacts: &mut Vec<Artifact>,
) -> Result<(), ExperimentError> {
    let seq = config.build_sequence()?;
    let predictions = protocols::predict_echoes(&seq, model);
    artifacts.push(Artifact { name: "echo_predictions.json".into(), contents: json(&predictions) });
    summary.echo_time = seq.windows.first().map(|w| w.center());

    let mut budget = None;
    if let Some(timings) = config.nlpe_timings() {
        summary.efficiency = Some(protocols::nlpe_efficiency(model.params(), &timings, config.sequence.eta_control));
        budget = Some(analytic_budget(config, model, &timings));
    }
    if config.ensemble.ions > 0 {
        let profile = config.profile()?;
        let outcome =
            simulate_echo(model, &seq, &config.pulses, &profile, config.ensemble.ions, config.run.seed, execution)?;
        let eta = outcome.efficiency[0] * ideal_control_scale(config);
        summary.efficiency_mc = Some(eta);
        if let Some(t) = outcome.peak_time {
            summary.echo_time = Some(t);
        }
        for record in &outcome.run.records {
            artifacts.push(Artifact { name: format!("echo_{}.csv", record.label), contents: record.to_csv() });
        }
        artifacts.push(Artifact { name: "population_trace.json".into(), contents: json(&outcome.run.trace) });
        if config.sequence.protocol == Protocol::Nlpe {
            budget = Some(
                noisebudget::window_noise(&seq, &outcome.run.trace, model.params(), &config.noise).map_err(sim_err)?,
            );
        }
    }

    let Some(eta) = summary.eta() else {
        return Ok(());
    };
    let noise = budget.as_ref().map(|b| b.detected("echo")).unwrap_or(config.noise.dark_counts);
    if let Some(b) = &budget {
        artifacts.push(Artifact { name: "noise_budget.json".into(), contents: json(&b.to_json()) });
    }
    let run = &config.run;
    let bins = (run.readout_window / run.bin_width).round().max(1.0) as usize;
    let echo_fwhm = match config.pulses.signal {
        PulseShape::Gaussian { fwhm } => fwhm / std::f64::consts::SQRT_2,
        _ => run.readout_window,
    };
    let width = bins as f64 * run.bin_width;
    let count_model = CountModel::gaussian_echo(-0.5 * width, bins, run.bin_width, 0.0, echo_fwhm, noise / bins as f64);
    let window_eta = eta * run.window_fraction;
    let with = analysis::simulate_counts(&count_model, run.mu, window_eta, run.trials, run.seed, execution)
        .map_err(sim_err)?;
    let without = analysis::simulate_counts(
        &count_model,
        0.0,
        window_eta,
        run.trials,
        run.seed ^ 0x9e37_79b9_7f4a_7c15,
        execution,
    )
    .map_err(sim_err)?;
    summary.snr = Some(analysis::empirical_snr(&with, &without, 0..bins));
    summary.values.insert("snr_expected".into(), noisebudget::snr(run.mu * window_eta, noise).value());
    summary.values.insert("noise_per_window".into(), noise);
    artifacts.push(Artifact { name: "histogram_with_input.csv".into(), contents: with.to_csv() });
    artifacts.push(Artifact { name: "histogram_without_input.csv".into(), contents: without.to_csv() });
    let meta = analysis::HistogramMeta { mu: run.mu, eta: window_eta, trials: run.trials, seed: run.seed };
    artifacts.push(Artifact { name: "histogram.json".into(), contents: json(&meta) });
    Ok(())
}

/// Ideal controls transfer perfectly, so the configured control efficiency
/// is applied afterwards; shaped pulses already carry their own.
fn ideal_control_scale(config: &ExperimentConfig) -> f64 {
    let ideal = |s: PulseShape| matches!(s, PulseShape::Ideal { .. });
    let p = &config.pulses;
    if ideal(p.pi35) && ideal(p.pi13) && ideal(p.pi15) {
        config.sequence.eta_control.powi(4)
    } else {
        1.0
    }
}

fn decay_grid(decay: &DecayConfig) -> Vec<f64> {
    if decay.points == 1 {
        return vec![decay.start];
    }
    (0..decay.points).map(|i| decay.start + (decay.stop - decay.start) * i as f64 / (decay.points - 1) as f64).collect()
}

fn run_decay(
    config: &ExperimentConfig,
    model: &Model,
    execution: Execution,
    summary: &mut Summary,
    artifacts: &mut Vec<Artifact>,
) -> Result<(), ExperimentError> {
    let decay = config.run.decay.expect("validated");
    let base = config.nlpe_timings().expect("validated");
    let grid = decay_grid(&decay);
    let analytic = protocols::decay_curve(model.params(), decay.variable, &grid, &base, config.sequence.eta_control);
    artifacts.push(Artifact { name: "decay_analytic.csv".into(), contents: analytic.to_csv() });
    let curve = if config.ensemble.ions > 0 {
        let profile = config.profile()?;
        let mut mc = mc_decay_curve(
            model,
            &config.pulses,
            &config.geometry(),
            &profile,
            decay.variable,
            &grid,
            &base,
            config.ensemble.ions,
            config.run.seed,
            execution,
        )?;
        let scale = ideal_control_scale(config);
        mc.efficiency.iter_mut().for_each(|e| *e *= scale);
        artifacts.push(Artifact { name: "decay_mc.csv".into(), contents: mc.to_csv() });
        summary.efficiency_mc = mc.efficiency.first().copied();
        pin_spin_storage(&mc, &base, model.params())
    } else {
        analytic.clone()
    };
    summary.efficiency = analytic.efficiency.first().copied();
    let fixed = (decay.variable == DecayVariable::Tau3).then_some(model.params().gamma_opt);
    if let Some(fit) = protocols::fit_decay(&curve, fixed) {
        summary.values.insert("fit_gamma_spin".into(), fit.gamma_spin);
        summary.values.insert("fit_amplitude".into(), fit.amplitude);
        artifacts.push(Artifact { name: "decay_fit.json".into(), contents: json(&fit) });
    }
    Ok(())
}

/// Rescales a tau3 curve whose spin storage grew with the delay to the
/// pinned spin storage of `base`, using the ground-spin dephasing law.
pub fn pin_spin_storage(curve: &DecayCurve, base: &NlpeTimings, params: &MaterialParams) -> DecayCurve {
    if curve.variable != DecayVariable::Tau3 {
        return curve.clone();
    }
    let spin = |tau2: f64| protocols::nlpe_efficiency_delays(params, tau2, 0.0, 1.0);
    let efficiency = curve
        .delays
        .iter()
        .zip(&curve.efficiency)
        .map(|(&delay, &eta)| eta * spin(base.tau2()) / spin(decay_timings(DecayVariable::Tau3, delay, base).tau2()))
        .collect();
    DecayCurve { variable: curve.variable, delays: curve.delays.clone(), efficiency }
}

/// Efficiency and per-bin noise of the qubit-storage configuration.
pub fn qubit_run_settings(config: &ExperimentConfig, model: &Model) -> (NlpeTimings, QubitRun) {
    let base = config.nlpe_timings().unwrap_or_else(NlpeTimings::reference);
    let spacing = config.run.qubit.pi13_spacing;
    let t3 = base.t2 + spacing;
    let timings = NlpeTimings { t3, t4: t3 + (base.t4 - base.t3), ..base };
    let eta =
        protocols::nlpe_efficiency(model.params(), &timings, config.sequence.eta_control) * config.run.window_fraction;
    let noise = analytic_budget(config, model, &timings).detected("echo");
    let run = QubitRun {
        mu: config.run.mu,
        eta,
        noise_per_bin: noise,
        trials: config.run.trials,
        phase_points: config.run.qubit.phase_points,
        delta_t: config.run.qubit.delta_t,
    };
    (timings, run)
}

fn run_qubit(
    config: &ExperimentConfig,
    model: &Model,
    execution: Execution,
    summary: &mut Summary,
    artifacts: &mut Vec<Artifact>,
) -> Result<(), ExperimentError> {
    let (timings, qubit) = qubit_run_settings(config, model);
    let measurements = analysis::simulate_qubit_measurements(&qubit, config.run.seed, execution).map_err(sim_err)?;
    let report = analysis::fidelity_report(&measurements).map_err(sim_err)?;
    summary.echo_time = Some(timings.echo_time());
    summary.efficiency = Some(qubit.eta);
    summary.f_avg = Some(report.f_avg);
    summary.values.insert("noise_per_bin".into(), qubit.noise_per_bin);
    summary.values.insert(
        "classical_bound".into(),
        analysis::classical_bound(qubit.mu, analysis::CALIBRATED_RESPONSE_PROB).map_err(sim_err)?,
    );
    let mut csv = String::from("input,phase2,counts\n");
    for (name, fringe) in [("plus", &measurements.plus), ("plus_i", &measurements.plus_i)] {
        if let Some(f) = fringe {
            for (p, c) in f.phases.iter().zip(&f.counts) {
                let _ = writeln!(csv, "{name},{p:.9e},{c}");
            }
        }
    }
    artifacts.push(Artifact { name: "qubit_fringes.csv".into(), contents: csv });
    artifacts.push(Artifact { name: "qubit_measurements.json".into(), contents: json(&measurements) });
    artifacts.push(Artifact { name: "fidelity_report.json".into(), contents: json(&report) });
    Ok(())
}

fn run_rose(config: &ExperimentConfig, model: &Model, summary: &mut Summary, artifacts: &mut Vec<Artifact>) {
    let timings = config.nlpe_timings().unwrap_or_else(NlpeTimings::reference);
    let nlpe = analytic_budget(config, model, &timings).detected("echo");
    let residual = noisebudget::rose_residual_inversion(config.sequence.eta_control);
    let cmp = noisebudget::rose_noise_comparison(model.params(), residual, nlpe);
    summary.values.insert("rose_noise".into(), cmp.rose_noise);
    summary.values.insert("nlpe_noise".into(), cmp.nlpe_noise);
    summary.values.insert("ratio".into(), cmp.ratio);
    artifacts.push(Artifact { name: "rose_comparison.json".into(), contents: json(&cmp) });
}

fn run_afc(config: &ExperimentConfig, summary: &mut Summary, artifacts: &mut Vec<Artifact>) {
    let d = config.model.d;
    let (finesse, eta) = protocols::afc_optimal_efficiency(d);
    summary.efficiency = Some(eta);
    summary.values.insert("finesse".into(), finesse);
    let mut csv = String::from("finesse,eta\n");
    for i in 0..=200 {
        let f = 1.0 + 0.05 * i as f64;
        let _ = writeln!(csv, "{f:.4},{:e}", protocols::afc_efficiency(d, f));
    }
    artifacts.push(Artifact { name: "afc_curve.csv".into(), contents: csv });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::IoFailure { path: path.display().to_string(), reason: e.to_string() }
}

/// Writes the artifacts and a manifest with their hashes.
pub fn write_artifacts(dir: &Path, outcome: &Outcome) -> Result<Manifest, ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for artifact in &outcome.artifacts {
        let path = dir.join(&artifact.name);
        fs::write(&path, &artifact.contents).map_err(|e| io_err(&path, e))?;
        files.push(ManifestEntry {
            path: artifact.name.clone(),
            sha256: sha256_hex(artifact.contents.as_bytes()),
            bytes: artifact.contents.len() as u64,
        });
    }
    let manifest = Manifest { experiment: outcome.summary.name.clone(), files };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, json(&manifest)).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Files whose content no longer matches the manifest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>, ExperimentError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ExperimentError::IoFailure { path: path.display().to_string(), reason: e.to_string() })?;
    let mut bad = Vec::new();
    for entry in &manifest.files {
        let file = dir.join(&entry.path);
        match fs::read(&file) {
            Ok(bytes) if sha256_hex(&bytes) == entry.sha256 => {}
            _ => bad.push(entry.path.clone()),
        }
    }
    Ok(bad)
}

fn set_dotted(value: &mut toml::Value, key: &str, new: toml::Value) -> bool {
    let mut node = value;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let next = match node {
            toml::Value::Table(t) => t.get_mut(part),
            toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        };
        let Some(child) = next else {
            return false;
        };
        if parts.peek().is_none() {
            *child = match (&*child, new) {
                (toml::Value::Integer(_), toml::Value::Float(f)) if f.fract() == 0.0 => toml::Value::Integer(f as i64),
                (_, v) => v,
            };
            return true;
        }
        node = child;
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub eta: Option<f64>,
    pub snr: Option<f64>,
    pub f_avg: Option<f64>,
}

/// Evenly spaced grid of `n` points from `start` to `stop`.
pub fn linear_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n).map(|i| start + (stop - start) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Re-runs the experiment with the dotted key set to each grid value.
/// Besides config keys, `tau2` and `tau3` move the NLPE pulse times; a
/// decay config then runs a single echo at each point.
pub fn sweep(
    config: &ExperimentConfig,
    key: &str,
    grid: &[f64],
    execution: Execution,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if grid.is_empty() {
        return Err(invalid("sweep", "grid is empty"));
    }
    let base = config.to_value();
    let mut rows = Vec::with_capacity(grid.len());
    for &x in grid {
        let point = match key {
            "tau2" | "tau3" => {
                let timings = config.nlpe_timings().ok_or_else(|| ExperimentError::UnknownVariable(key.into()))?;
                let variable = if key == "tau2" { DecayVariable::Tau2 } else { DecayVariable::Tau3 };
                let t = decay_timings(variable, x, &timings);
                let kind = if config.run.kind == RunKind::Decay { RunKind::Echo } else { config.run.kind };
                ExperimentConfig {
                    sequence: SequenceConfig { times: t.as_array().to_vec(), ..config.sequence.clone() },
                    run: RunConfig { kind, ..config.run.clone() },
                    ..config.clone()
                }
            }
            _ => {
                let mut value = base.clone();
                if !set_dotted(&mut value, key, toml::Value::Float(x)) {
                    return Err(ExperimentError::UnknownVariable(key.to_string()));
                }
                ExperimentConfig::from_value(value)?
            }
        };
        let outcome = run_experiment(&point, execution)?;
        let s = outcome.summary;
        rows.push(SweepRow { value: x, eta: s.eta(), snr: s.snr, f_avg: s.f_avg });
    }
    Ok(rows)
}

pub fn sweep_csv(key: &str, rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut out = format!("{key},eta,snr,f_avg\n");
    for r in rows {
        let _ = writeln!(out, "{:e},{},{},{}", r.value, cell(r.eta), cell(r.snr), cell(r.f_avg));
    }
    out
}
