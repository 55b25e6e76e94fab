use std::f64::consts::PI;

use nlpe_core::analysis::{self, Basis, CountModel};
use nlpe_core::exec::Execution;
use nlpe_core::ionensemble::DensityMatrix;
use nlpe_core::noisebudget;
use nlpe_core::physmodel::{LevelLabel, MaterialParams, Transition};
use nlpe_core::protocols;
use nlpe_core::pulseshape::{self, PulseRole, PulseShape, PulseSpec, TransferMap};
use nlpe_core::specprep::{self, Line, Pump, PumpModel, SpectralPopulation};
use num_complex::Complex64;
use proptest::prelude::*;

fn spec(shape: PulseShape, area: f64, phase: f64) -> PulseSpec {
    PulseSpec {
        transition: Transition::F15,
        center_time: 0.0,
        shape,
        nominal_area: area,
        phase,
        direction: [1.0, 0.0],
        role: PulseRole::Control,
    }
}

fn shape_strategy() -> impl Strategy<Value = PulseShape> {
    prop_oneof![
        (0.3e-6..2e-6f64).prop_map(|fwhm| PulseShape::Gaussian { fwhm }),
        (0.5e6..3e6f64, 1e6..4e6f64, 0.0..6.0f64).prop_map(|(peak_rabi, beta, chirp_mu)| PulseShape::Sech {
            peak_rabi,
            beta,
            chirp_mu
        }),
        (0.0..3e6f64, 0.5e-6..3e-6f64).prop_map(|(sweep_width, duration)| PulseShape::Chirp { sweep_width, duration }),
    ]
}

fn transition_strategy() -> impl Strategy<Value = Transition> {
    prop_oneof![Just(Transition::F15), Just(Transition::F35), Just(Transition::F13), Just(Transition::F33),]
}

fn state_strategy() -> impl Strategy<Value = [Complex64; 4]> {
    prop::array::uniform4((-1.0..1.0f64, -1.0..1.0f64)).prop_filter_map("nonzero state", |c| {
        let psi = c.map(|(re, im)| Complex64::new(re, im));
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        (norm > 1e-3).then(|| psi.map(|z| z / norm))
    })
}

fn mixture(states: &[[Complex64; 4]], weights: &[f64]) -> DensityMatrix {
    let total: f64 = weights.iter().sum();
    let mut rho = DensityMatrix([[Complex64::new(0.0, 0.0); 4]; 4]);
    for (psi, w) in states.iter().zip(weights) {
        let pure = DensityMatrix::from_amplitudes(*psi);
        for r in 0..4 {
            for c in 0..4 {
                rho.0[r][c] += pure.0[r][c] * (w / total);
            }
        }
    }
    rho
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maps_are_unitary(shape in shape_strategy(), area in 0.1..4.0f64, phase in -PI..PI, detuning in -3e6..3e6f64) {
        let map = pulseshape::propagate_two_level(&spec(shape, area, phase), detuning).unwrap();
        prop_assert!(map.unitarity_error() < 1e-9, "defect {}", map.unitarity_error());
    }

    #[test]
    fn unchirped_transfer_is_even_in_detuning(fwhm in 0.3e-6..2e-6f64, area in 0.2..4.0f64, detuning in 0.0..2e6f64) {
        let s = spec(PulseShape::Gaussian { fwhm }, area, 0.4);
        let up = pulseshape::propagate_two_level(&s, detuning).unwrap().transfer_probability();
        let down = pulseshape::propagate_two_level(&s, -detuning).unwrap().transfer_probability();
        prop_assert!((up - down).abs() < 1e-9);
    }

    #[test]
    fn density_matrix_stays_physical(
        states in prop::collection::vec(state_strategy(), 1..4),
        weights in prop::collection::vec(0.05..1.0f64, 3),
        rotations in prop::collection::vec((transition_strategy(), 0.0..2.0 * PI, -PI..PI), 1..6),
    ) {
        let mut rho = mixture(&states, &weights[..states.len()]);
        let purity = rho.purity();
        for (transition, area, phase) in rotations {
            let (lower, upper) = transition.levels();
            rho.apply_map(&TransferMap::rotation(area, phase), lower.index(), upper.index());
        }
        prop_assert!((rho.trace() - 1.0).abs() < 1e-12);
        prop_assert!(rho.hermiticity_error() < 1e-12);
        prop_assert!(rho.eigenvalues().iter().all(|&l| l > -1e-12));
        prop_assert!((rho.purity() - purity).abs() < 1e-12);
    }

    #[test]
    fn pure_states_have_unit_purity(psi in state_strategy()) {
        let rho = DensityMatrix::from_amplitudes(psi);
        prop_assert!((rho.purity() - 1.0).abs() < 1e-12);
        let pops: f64 = LevelLabel::ALL.iter().map(|&l| rho.population(l)).sum();
        prop_assert!((pops - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pumping_conserves_and_depletes(
        line in prop::sample::select(vec![Line::F15, Line::F35, Line::F13, Line::F53]),
        detuning in -2e6..2e6f64,
        width in 0.5e6..5e6f64,
        reps in 1u32..20,
        transfer in 0.05..1.0f64,
    ) {
        let start = SpectralPopulation::reference_default();
        let pump = Pump { detuning, ..Pump::new(line, width) }.repeated(reps);
        let model = PumpModel { transfer, ..PumpModel::default() };
        let after = specprep::pump_step(&start, &pump, &model).unwrap();
        prop_assert!((after.total() - start.total()).abs() / start.total() < 1e-9);
        prop_assert!(after.levels.iter().flatten().all(|&p| p >= 0.0));
        let (lo, hi) = pump.window(&start.hyperfine);
        prop_assert!(after.population_in_window(line, lo, hi) <= start.population_in_window(line, lo, hi) + 1e-12);
        let again = specprep::pump_step(&after, &pump, &model).unwrap();
        prop_assert!(again.population_in_window(line, lo, hi) <= after.population_in_window(line, lo, hi) + 1e-12);
    }

    #[test]
    fn efficiency_is_monotone(
        tau2 in 1e-6..100e-6f64,
        t32 in 1e-6..40e-6f64,
        extra in 0.1e-6..20e-6f64,
        eta in 0.5..0.99f64,
    ) {
        let p = MaterialParams::default();
        let base = protocols::nlpe_efficiency_delays(&p, tau2, t32, eta);
        prop_assert!(protocols::nlpe_efficiency_delays(&p, tau2 + extra, t32, eta) < base);
        prop_assert!(protocols::nlpe_efficiency_delays(&p, tau2, t32 + extra, eta) < base);
        prop_assert!(protocols::nlpe_efficiency_delays(&p, tau2, t32, (eta + 0.01).min(1.0)) > base);
        prop_assert!(base > 0.0 && base <= p.d * p.d * (-p.d).exp());
    }

    #[test]
    fn noise_budget_invariants(d in 0.0..3.0f64, d_fc in 0.0..10.0f64, p_e3 in 0.0..1.0f64, storage in 0.0..50e-6f64) {
        let n = noisebudget::inverted_medium_noise(d);
        prop_assert!(n >= d);
        let filtered = noisebudget::filtered_noise(n, d_fc);
        prop_assert!(filtered >= 0.0 && filtered <= n);
        let params = MaterialParams { d: d.max(1e-3), d_fc, ..MaterialParams::default() };
        let budget = noisebudget::budget_from_populations(p_e3, storage, "echo", &params, &Default::default());
        for entry in &budget.entries {
            prop_assert!(entry.after_filter >= 0.0 && entry.after_filter <= entry.before_filter + 1e-18);
            let attenuation = if entry.channel.filterable() { (-d_fc).exp() } else { 1.0 };
            prop_assert!((entry.after_filter - attenuation * entry.before_filter).abs() <= 1e-15);
        }
        let longer = noisebudget::budget_from_populations(p_e3, storage + 1e-6, "echo", &params, &Default::default());
        prop_assert!(longer.detected("echo") >= budget.detected("echo"));
    }

    #[test]
    fn classical_bound_monotone(mu in 0.2..6.0f64, budget in 0.001..0.5f64, step in 0.001..0.3f64) {
        let f = analysis::classical_bound(mu, budget).unwrap();
        prop_assert!((0.5..=1.0).contains(&f));
        let mu_up = analysis::classical_bound(mu + step, budget).unwrap();
        prop_assert!(mu_up >= f - 1e-12);
        let wider = analysis::classical_bound(mu, (budget + step).min(1.0)).unwrap();
        prop_assert!(wider <= f + 1e-12);
    }

    #[test]
    fn basis_fidelity_increases_with_correct_counts(correct in 1u64..10_000, wrong in 0u64..10_000, extra in 1u64..1000) {
        let f = analysis::fidelity_basis(correct, wrong, Basis::Early).unwrap();
        prop_assert!(analysis::fidelity_basis(correct + extra, wrong, Basis::Early).unwrap() > f);
        prop_assert_eq!(analysis::fidelity_basis(wrong, correct, Basis::Late).unwrap(), f);
        prop_assert!((0.0..=1.0).contains(&f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn histograms_ignore_execution_mode(seed in any::<u64>(), trials in 1u64..3000, mu in 0.0..3.0f64) {
        let model = CountModel::gaussian_echo(0.0, 6, analysis::DEFAULT_BIN_WIDTH, 0.8e-6, 1.85e-6, 3e-4);
        let a = analysis::simulate_counts(&model, mu, 0.06, trials, seed, Execution::Sequential).unwrap();
        let b = analysis::simulate_counts(&model, mu, 0.06, trials, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }
}
