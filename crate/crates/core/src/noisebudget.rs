//! Spontaneous-emission noise per detection window, filter attenuation and
//! signal-to-noise ratios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ionensemble::PopulationSnapshot;
use crate::physmodel::{LevelLabel, MaterialParams};
use crate::protocols::{ProtocolTag, Sequence};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("population trace has no snapshot for '{0}'")]
    MissingPopulationTrace(String),
    #[error("noise budget is only defined for the four-level sequence, got {0:?}")]
    UnsupportedProtocol(ProtocolTag),
}

/// Spectral channel a noise photon is emitted into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    /// Same frequency as the echo; passes the filter.
    F15Like,
    /// Control frequency; absorbed by the filter crystal.
    F13Like,
}

impl Channel {
    pub fn filterable(self) -> bool {
        matches!(self, Channel::F13Like)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub window: String,
    pub source: LevelLabel,
    pub channel: Channel,
    /// Photons per trial reaching the filter.
    pub before_filter: f64,
    pub after_filter: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub entries: Vec<NoiseEntry>,
}

impl NoiseBudget {
    pub fn entry(&self, window: &str) -> Option<&NoiseEntry> {
        self.entries.iter().find(|e| e.window == window)
    }

    /// Noise after the filter in `window`, or zero if absent.
    pub fn detected(&self, window: &str) -> f64 {
        self.entries.iter().filter(|e| e.window == window).map(|e| e.after_filter).sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &NoiseEntry> = self.entries.iter().map(|e| (e.window.as_str(), e)).collect();
        serde_json::to_value(map).unwrap_or_default()
    }
}

/// Knobs that are not material properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    /// Transfer efficiency of the final pi35 acting on leaked g3 population.
    pub eta_rephase: f64,
    /// Detector dark counts per detection window.
    pub dark_counts: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self { eta_rephase: 1.0, dark_counts: 0.0 }
    }
}

/// Label of the window between the two pi13 pulses.
pub const FIRST_PAIR_WINDOW: &str = "first-pair";

/// Photons per temporal-spatial mode emitted by a fully inverted medium of
/// optical depth `d_inverted`.
pub fn inverted_medium_noise(d_inverted: f64) -> f64 {
    d_inverted.exp_m1()
}

pub fn filtered_noise(n: f64, d_fc: f64) -> f64 {
    n * (-d_fc).exp()
}

/// Fraction of e3 population that decays and lands in g3 during `storage`.
pub fn leaked_fraction(storage: f64, params: &MaterialParams) -> f64 {
    -(-storage / params.t1_excited).exp_m1() * params.branching_e3_to_g3
}

/// Budget from the e3 population after the first pi13 and the e3 storage
/// time between the two pi13 pulses.
pub fn budget_from_populations(
    p_e3: f64,
    storage: f64,
    echo_window: &str,
    params: &MaterialParams,
    settings: &NoiseSettings,
) -> NoiseBudget {
    let per_mode = inverted_medium_noise(params.d);
    let first = p_e3.max(0.0) * per_mode;
    let leak = p_e3.max(0.0) * leaked_fraction(storage, params) * settings.eta_rephase * per_mode;
    let dark = settings.dark_counts.max(0.0);
    NoiseBudget {
        entries: vec![
            NoiseEntry {
                window: FIRST_PAIR_WINDOW.to_string(),
                source: LevelLabel::E3,
                channel: Channel::F13Like,
                before_filter: first + dark,
                after_filter: filtered_noise(first, params.d_fc) + dark,
            },
            NoiseEntry {
                window: echo_window.to_string(),
                source: LevelLabel::E5,
                channel: Channel::F15Like,
                before_filter: leak + dark,
                after_filter: leak + dark,
            },
        ],
    }
}

/// Noise budget of a four-level sequence from its population trace.
pub fn window_noise(
    seq: &Sequence,
    populations: &[PopulationSnapshot],
    params: &MaterialParams,
    settings: &NoiseSettings,
) -> Result<NoiseBudget, NoiseError> {
    if seq.tag != ProtocolTag::Nlpe || seq.pulses.len() != 5 {
        return Err(NoiseError::UnsupportedProtocol(seq.tag));
    }
    let snapshot = |event: &str| {
        populations
            .iter()
            .find(|s| s.event == event)
            .ok_or_else(|| NoiseError::MissingPopulationTrace(event.to_string()))
    };
    let after_first = snapshot("pulse 2")?;
    snapshot("pulse 3")?;
    let storage = seq.pulses[3].center_time - seq.pulses[2].center_time;
    let echo = seq.windows.first().map(|w| w.label.as_str()).unwrap_or("echo");
    Ok(budget_from_populations(after_first.populations[LevelLabel::E3.index()], storage, echo, params, settings))
}

/// Branching ratio that makes the echo-window noise equal `target`.
pub fn calibrate_branching(
    target: f64,
    p_e3: f64,
    storage: f64,
    params: &MaterialParams,
    settings: &NoiseSettings,
) -> f64 {
    let unit = MaterialParams { branching_e3_to_g3: 1.0, ..*params };
    let per_unit = p_e3 * leaked_fraction(storage, &unit) * settings.eta_rephase * inverted_medium_noise(params.d);
    (target - settings.dark_counts) / per_unit
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Snr {
    Finite(f64),
    Infinite,
}

impl Snr {
    pub fn value(self) -> f64 {
        match self {
            Snr::Finite(v) => v,
            Snr::Infinite => f64::INFINITY,
        }
    }
}

pub fn snr(signal: f64, noise: f64) -> Snr {
    if noise > 0.0 {
        Snr::Finite(signal / noise)
    } else {
        Snr::Infinite
    }
}

/// Excited population left by two rephasing pulses of transfer efficiency
/// `eta_control`.
pub fn rose_residual_inversion(eta_control: f64) -> f64 {
    (1.0 - (2.0 * eta_control - 1.0).powi(2)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoseComparison {
    pub rose_noise: f64,
    pub nlpe_noise: f64,
    pub ratio: f64,
    pub rose_channel: Channel,
    pub nlpe_channel: Channel,
}

/// ROSE noise from a residual inversion against the NLPE echo-window noise.
pub fn rose_noise_comparison(params: &MaterialParams, residual_inversion: f64, nlpe_noise: f64) -> RoseComparison {
    let rose_noise = residual_inversion.clamp(0.0, 1.0) * inverted_medium_noise(params.d);
    RoseComparison {
        rose_noise,
        nlpe_noise,
        ratio: snr(rose_noise, nlpe_noise).value(),
        rose_channel: Channel::F15Like,
        nlpe_channel: Channel::F13Like,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ionensemble::Geometry;
    use crate::protocols::{build_nlpe, NlpeTimings, PulseSet};
    use approx::assert_relative_eq;

    #[test]
    fn inverted_medium_examples() {
        assert_eq!(inverted_medium_noise(0.0), 0.0);
        assert_relative_eq!(inverted_medium_noise(0.6), 0.822_118_8, max_relative = 1e-6);
        for d in [1e-4, 5e-3, 0.02] {
            let n = inverted_medium_noise(d);
            assert!((n - d).abs() / n < 0.01);
        }
    }

    #[test]
    fn filtered_examples() {
        assert_relative_eq!(filtered_noise(0.6f64.exp_m1(), 6.6), 1.1184e-3, max_relative = 1e-3);
        assert_eq!(filtered_noise(0.3, 0.0), 0.3);
        assert_eq!(filtered_noise(0.0, 6.6), 0.0);
    }

    #[test]
    fn snr_examples() {
        assert_relative_eq!(snr(1.17 * 0.064, 1.76e-3).value(), 42.545, max_relative = 1e-3);
        assert_eq!(snr(0.2, 0.2), Snr::Finite(1.0));
        assert_eq!(snr(0.1, 0.0), Snr::Infinite);
    }

    fn trace(p_e3: f64) -> Vec<PopulationSnapshot> {
        ["pulse 2", "pulse 3"]
            .iter()
            .map(|e| PopulationSnapshot { time: 0.0, event: e.to_string(), populations: [0.0, 0.0, p_e3, 0.0] })
            .collect()
    }

    #[test]
    fn window_noise_from_trace() {
        let params = MaterialParams::default();
        let seq = build_nlpe(&NlpeTimings::reference(), &PulseSet::default(), &Geometry::default()).unwrap();
        let budget = window_noise(&seq, &trace(1.0), &params, &NoiseSettings::default()).unwrap();
        let first = budget.entry(FIRST_PAIR_WINDOW).unwrap();
        assert_relative_eq!(first.after_filter, 1.1184e-3, max_relative = 1e-3);
        assert!(first.after_filter / 9e-4 < 1.3);
        let echo = budget.entry("echo").unwrap();
        assert_eq!(echo.channel, Channel::F15Like);
        assert!(echo.after_filter > 0.0 && echo.after_filter <= echo.before_filter);
        // no trace, no budget
        assert!(matches!(
            window_noise(&seq, &trace(1.0)[..1], &params, &NoiseSettings::default()),
            Err(NoiseError::MissingPopulationTrace(_))
        ));
    }

    #[test]
    fn no_leak_without_decay() {
        let params = MaterialParams { t1_excited: f64::INFINITY, ..MaterialParams::default() };
        let b = budget_from_populations(1.0, 8.4e-6, "echo", &params, &NoiseSettings::default());
        assert_eq!(b.detected("echo"), 0.0);
    }

    #[test]
    fn branching_calibration_hits_target() {
        let params = MaterialParams::default();
        let settings = NoiseSettings::default();
        let b = calibrate_branching(1.5e-3, 1.0, 8.4e-6, &params, &settings);
        assert!(b > 0.0 && b < 1.0);
        let tuned = MaterialParams { branching_e3_to_g3: b, ..params };
        let budget = budget_from_populations(1.0, 8.4e-6, "echo", &tuned, &settings);
        assert_relative_eq!(budget.detected("echo"), 1.5e-3, max_relative = 1e-12);
    }

    #[test]
    fn rose_structure() {
        let params = MaterialParams::default();
        assert_eq!(rose_noise_comparison(&params, 0.0, 1e-3).rose_noise, 0.0);
        let r = rose_residual_inversion(0.938);
        let cmp = rose_noise_comparison(&params, r, 1.5e-3);
        assert!(cmp.ratio >= 30.0);
        assert!(!cmp.rose_channel.filterable());
        assert!(cmp.nlpe_channel.filterable());
        assert_eq!(rose_residual_inversion(1.0), 0.0);
        assert_eq!(rose_residual_inversion(0.5), 1.0);
    }

    #[test]
    fn json_keyed_by_window() {
        let b = budget_from_populations(1.0, 8.4e-6, "echo", &MaterialParams::default(), &NoiseSettings::default());
        let json = b.to_json();
        assert!(json.get("echo").is_some() && json.get(FIRST_PAIR_WINDOW).is_some());
    }
}
