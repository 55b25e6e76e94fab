//! Four-level scheme and material constants.
//!
//! Everything downstream reads its physics from a [`Model`], obtained by
//! running [`validate_model`] over a [`LevelScheme`] and [`MaterialParams`].
//! Frequencies are in Hz, times in s, depths are dimensionless.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closure tolerance on `f15 + f33 - f13 - f35`, in Hz.
pub const FREQUENCY_CLOSURE_TOLERANCE: f64 = 1.0;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// The four levels of the scheme, in density-matrix index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelLabel {
    G1,
    G3,
    E3,
    E5,
}

impl LevelLabel {
    pub const ALL: [LevelLabel; 4] = [LevelLabel::G1, LevelLabel::G3, LevelLabel::E3, LevelLabel::E5];

    /// Row/column of this level in a 4x4 density matrix.
    pub fn index(self) -> usize {
        match self {
            LevelLabel::G1 => 0,
            LevelLabel::G3 => 1,
            LevelLabel::E3 => 2,
            LevelLabel::E5 => 3,
        }
    }

    pub fn is_excited(self) -> bool {
        matches!(self, LevelLabel::E3 | LevelLabel::E5)
    }
}

/// One of the four optical transitions of the scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transition {
    /// g1 <-> e5, the signal transition.
    F15,
    /// g3 <-> e5.
    F35,
    /// g1 <-> e3.
    F13,
    /// g3 <-> e3, never driven directly.
    F33,
}

impl Transition {
    pub const ALL: [Transition; 4] = [Transition::F15, Transition::F35, Transition::F13, Transition::F33];

    /// (lower, upper) levels.
    pub fn levels(self) -> (LevelLabel, LevelLabel) {
        match self {
            Transition::F15 => (LevelLabel::G1, LevelLabel::E5),
            Transition::F35 => (LevelLabel::G3, LevelLabel::E5),
            Transition::F13 => (LevelLabel::G1, LevelLabel::E3),
            Transition::F33 => (LevelLabel::G3, LevelLabel::E3),
        }
    }

    /// The transition connecting `a` and `b`, if they form a ground/excited pair.
    pub fn between(a: LevelLabel, b: LevelLabel) -> Option<Transition> {
        Transition::ALL.into_iter().find(|t| {
            let (l, u) = t.levels();
            (l == a && u == b) || (l == b && u == a)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelKind {
    Ground,
    Excited,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub label: LevelLabel,
    pub kind: LevelKind,
    /// Energy offset in Hz (ground levels relative to g1, excited levels absolute).
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionLine {
    pub transition: Transition,
    /// Carrier frequency in Hz.
    pub carrier: f64,
    /// Relative dipole strength.
    pub dipole: f64,
}

/// Level structure of the isolated four-level system.
///
/// The default hyperfine splittings are illustrative placeholders; nothing in
/// the efficiency, noise or fidelity results depends on their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelScheme {
    pub levels: Vec<Level>,
    pub transitions: Vec<TransitionLine>,
}

impl LevelScheme {
    /// Builds a closure-consistent scheme from the signal carrier and the two
    /// spin splittings (g1->g3 and e3->e5).
    pub fn from_splittings(f15: f64, ground_splitting: f64, excited_splitting: f64) -> Self {
        let f35 = f15 - ground_splitting;
        let f13 = f15 - excited_splitting;
        let f33 = f13 - ground_splitting;
        let levels = vec![
            Level { label: LevelLabel::G1, kind: LevelKind::Ground, energy: 0.0 },
            Level { label: LevelLabel::G3, kind: LevelKind::Ground, energy: ground_splitting },
            Level { label: LevelLabel::E3, kind: LevelKind::Excited, energy: f13 },
            Level { label: LevelLabel::E5, kind: LevelKind::Excited, energy: f15 },
        ];
        let line = |transition, carrier| TransitionLine { transition, carrier, dipole: 1.0 };
        let transitions = vec![
            line(Transition::F15, f15),
            line(Transition::F35, f35),
            line(Transition::F13, f13),
            line(Transition::F33, f33),
        ];
        Self { levels, transitions }
    }

    pub fn line(&self, transition: Transition) -> Option<&TransitionLine> {
        self.transitions.iter().find(|l| l.transition == transition)
    }

    /// Carrier frequency, panicking on a scheme that skipped validation.
    pub fn carrier(&self, transition: Transition) -> f64 {
        self.line(transition)
            .map(|l| l.carrier)
            .unwrap_or_else(|| panic!("transition {transition:?} missing from level scheme"))
    }

    /// `f15 + f33 - f13 - f35`, zero for a consistent scheme.
    pub fn closure_residual(&self) -> Option<f64> {
        let f = |t| self.line(t).map(|l| l.carrier);
        Some((f(Transition::F15)? - f(Transition::F13)?) - (f(Transition::F35)? - f(Transition::F33)?))
    }
}

impl Default for LevelScheme {
    fn default() -> Self {
        // 580 nm line; spin splittings are placeholders.
        Self::from_splittings(516.847_5e12, 34.5e6, 102.0e6)
    }
}

/// Material and preparation constants of the memory and filter crystals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialParams {
    /// Memory absorption depth after preparation.
    pub d: f64,
    /// Effective absorption depth of the (double-passed) filter crystal.
    pub d_fc: f64,
    /// Ground-spin inhomogeneous FWHM, Hz.
    pub gamma13: f64,
    /// Excited-spin inhomogeneous FWHM, Hz.
    pub gamma35bar: f64,
    /// Effective optical decoherence rate, s^-1.
    pub gamma_opt: f64,
    /// Excited-state population lifetime, s.
    pub t1_excited: f64,
    /// Optical inhomogeneous FWHM, Hz.
    pub opt_inhomogeneous_fwhm: f64,
    /// Fraction of e3 decay that lands in g3.
    pub branching_e3_to_g3: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            d: 0.6,
            d_fc: 6.6,
            gamma13: 5.6e3,
            gamma35bar: 18.6e3,
            gamma_opt: 12.0e3,
            t1_excited: 1.9e-3,
            opt_inhomogeneous_fwhm: 0.7e9,
            branching_e3_to_g3: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("negative value for {field}: {value}")]
    NegativeRate { field: &'static str, value: f64 },
    #[error("frequency closure violated: f15 + f33 - f13 - f35 = {residual} Hz")]
    FrequencyClosureViolated { residual: f64 },
    #[error("branching ratio {value} outside [0, 1]")]
    BranchingOutOfRange { value: f64 },
    #[error("level scheme needs two ground and two excited levels, found {ground} ground and {excited} excited")]
    LevelCount { ground: usize, excited: usize },
    #[error("transition {0:?} missing or duplicated")]
    MissingTransition(Transition),
    #[error("carrier frequencies of {0:?} and {1:?} coincide")]
    DuplicateCarrier(Transition, Transition),
}

/// A scheme and parameter set that passed validation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    scheme: LevelScheme,
    params: MaterialParams,
}

impl Model {
    pub fn scheme(&self) -> &LevelScheme {
        &self.scheme
    }

    pub fn params(&self) -> &MaterialParams {
        &self.params
    }

    /// Replaces the parameters, revalidating.
    pub fn with_params(&self, params: MaterialParams) -> Result<Model, Vec<ModelError>> {
        validate_model(&self.scheme, &params)
    }
}

impl Default for Model {
    fn default() -> Self {
        validate_model(&LevelScheme::default(), &MaterialParams::default()).expect("default model is valid")
    }
}

/// Checks every invariant of the scheme and parameters, collecting all
/// violations rather than stopping at the first.
pub fn validate_model(scheme: &LevelScheme, params: &MaterialParams) -> Result<Model, Vec<ModelError>> {
    let mut errors = Vec::new();

    let ground = scheme.levels.iter().filter(|l| l.kind == LevelKind::Ground).count();
    let excited = scheme.levels.iter().filter(|l| l.kind == LevelKind::Excited).count();
    let kinds_match = scheme.levels.iter().all(|l| (l.kind == LevelKind::Excited) == l.label.is_excited());
    if ground != 2 || excited != 2 || !kinds_match || scheme.levels.len() != 4 {
        errors.push(ModelError::LevelCount { ground, excited });
    }

    let mut lines = Vec::new();
    for t in Transition::ALL {
        let matching: Vec<_> = scheme.transitions.iter().filter(|l| l.transition == t).collect();
        if matching.len() == 1 {
            lines.push(*matching[0]);
        } else {
            errors.push(ModelError::MissingTransition(t));
        }
    }
    for (i, a) in lines.iter().enumerate() {
        for b in &lines[i + 1..] {
            if a.carrier == b.carrier {
                errors.push(ModelError::DuplicateCarrier(a.transition, b.transition));
            }
        }
    }
    for line in &lines {
        if line.carrier < 0.0 || line.dipole < 0.0 {
            errors.push(ModelError::NegativeRate { field: "transition", value: line.carrier.min(line.dipole) });
        }
    }
    if lines.len() == 4 {
        if let Some(residual) = scheme.closure_residual() {
            if !(residual.abs() <= FREQUENCY_CLOSURE_TOLERANCE) {
                errors.push(ModelError::FrequencyClosureViolated { residual });
            }
        }
    }

    let nonnegative = [
        ("d", params.d),
        ("d_fc", params.d_fc),
        ("gamma13", params.gamma13),
        ("gamma35bar", params.gamma35bar),
        ("gamma_opt", params.gamma_opt),
        ("t1_excited", params.t1_excited),
        ("opt_inhomogeneous_fwhm", params.opt_inhomogeneous_fwhm),
    ];
    for (field, value) in nonnegative {
        if !(value >= 0.0) {
            errors.push(ModelError::NegativeRate { field, value });
        }
    }
    if !(0.0..=1.0).contains(&params.branching_e3_to_g3) {
        errors.push(ModelError::BranchingOutOfRange { value: params.branching_e3_to_g3 });
    }

    if errors.is_empty() {
        Ok(Model { scheme: scheme.clone(), params: *params })
    } else {
        Err(errors)
    }
}

/// Optical wavenumber inside the crystal, rad/m.
pub fn wavenumber(frequency: f64, refractive_index: f64) -> f64 {
    2.0 * std::f64::consts::PI * refractive_index * frequency / SPEED_OF_LIGHT
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults_validate() {
        let model = validate_model(&LevelScheme::default(), &MaterialParams::default()).unwrap();
        let p = model.params();
        assert_eq!(p.d, 0.6);
        assert_eq!(p.d_fc, 6.6);
        assert_eq!(p.gamma13, 5.6e3);
        assert_eq!(p.gamma35bar, 18.6e3);
        assert_eq!(p.gamma_opt, 12.0e3);
        assert_eq!(p.opt_inhomogeneous_fwhm, 0.7e9);
    }

    #[test]
    fn negative_depth_is_rejected() {
        let params = MaterialParams { d: -0.1, ..Default::default() };
        let errs = validate_model(&LevelScheme::default(), &params).unwrap_err();
        assert!(matches!(errs[..], [ModelError::NegativeRate { field: "d", .. }]));
    }

    #[test]
    fn closure_off_by_one_khz() {
        let mut scheme = LevelScheme::default();
        scheme.transitions[3].carrier += 1.0e3;
        let errs = validate_model(&scheme, &MaterialParams::default()).unwrap_err();
        assert!(matches!(errs[..], [ModelError::FrequencyClosureViolated { .. }]));
    }

    #[test]
    fn collects_every_violation() {
        let mut scheme = LevelScheme::default();
        scheme.transitions[3].carrier += 1.0e3;
        let params = MaterialParams { gamma13: -1.0, branching_e3_to_g3: 1.5, ..Default::default() };
        let errs = validate_model(&scheme, &params).unwrap_err();
        assert_eq!(errs.len(), 3);
        assert!(errs.iter().any(|e| matches!(e, ModelError::BranchingOutOfRange { .. })));
    }

    #[test]
    fn nan_is_not_a_valid_rate() {
        let params = MaterialParams { gamma_opt: f64::NAN, ..Default::default() };
        assert!(validate_model(&LevelScheme::default(), &params).is_err());
    }

    #[test]
    fn duplicate_carrier_detected() {
        let mut scheme = LevelScheme::default();
        scheme.transitions[1].carrier = scheme.transitions[0].carrier;
        let errs = validate_model(&scheme, &MaterialParams::default()).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, ModelError::DuplicateCarrier(..))));
    }

    #[test]
    fn validation_is_idempotent() {
        let a = validate_model(&LevelScheme::default(), &MaterialParams::default()).unwrap();
        let b = validate_model(a.scheme(), a.params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toml_round_trip_is_bit_exact() {
        let params = MaterialParams { gamma13: 5.600_000_000_000_001e3, ..Default::default() };
        let text = toml::to_string(&params).unwrap();
        let back: MaterialParams = toml::from_str(&text).unwrap();
        assert_eq!(back.gamma13.to_bits(), params.gamma13.to_bits());
        assert_eq!(back, params);

        let scheme = LevelScheme::default();
        let text = toml::to_string(&scheme).unwrap();
        let back: LevelScheme = toml::from_str(&text).unwrap();
        assert_eq!(back, scheme);
    }

    #[test]
    fn unknown_parameter_key_rejected() {
        let err = toml::from_str::<MaterialParams>("d = 0.6\nbogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
