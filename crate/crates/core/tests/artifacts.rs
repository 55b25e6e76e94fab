use nlpe_core::exec::Execution;
use nlpe_core::experiment::{self, ExperimentConfig, MANIFEST_NAME};

fn small_echo(seed: u64) -> ExperimentConfig {
    let text =
        format!("name = \"small\"\n[ensemble]\nions = 3000\n[run]\nkind = \"echo\"\ntrials = 2000\nseed = {seed}\n");
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn artifacts_round_trip_through_manifest() {
    let outcome = experiment::run_experiment(&small_echo(4), Execution::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = experiment::write_artifacts(dir.path(), &outcome).unwrap();
    assert!(manifest.files.iter().any(|f| f.path == "summary.json"));
    assert!(dir.path().join(MANIFEST_NAME).exists());
    assert!(experiment::verify_manifest(dir.path()).unwrap().is_empty());

    let victim = &manifest.files[0].path;
    std::fs::write(dir.path().join(victim), "tampered").unwrap();
    assert_eq!(experiment::verify_manifest(dir.path()).unwrap(), vec![victim.clone()]);
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let a = experiment::run_experiment(&small_echo(9), Execution::Sequential).unwrap();
    let b = experiment::run_experiment(&small_echo(9), Execution::Parallel).unwrap();
    let c = experiment::run_experiment(&small_echo(10), Execution::Sequential).unwrap();
    let bytes =
        |o: &experiment::Outcome| o.artifacts.iter().map(|a| (a.name.clone(), a.contents.clone())).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn every_run_kind_produces_a_summary() {
    let cases = [
        "name = \"q\"\n[run]\nkind = \"qubit\"\ntrials = 500\nmu = 2.29\n",
        "name = \"r\"\n[run]\nkind = \"rose-comparison\"\n",
        "name = \"a\"\n[run]\nkind = \"afc\"\n",
        "name = \"d\"\n[ensemble]\nions = 1500\n[run]\nkind = \"decay\"\n[run.decay]\nvariable = \"tau2\"\nstart = 13.3e-6\nstop = 40e-6\npoints = 3\n",
    ];
    for text in cases {
        let config = ExperimentConfig::from_toml(text).unwrap();
        let outcome = experiment::run_experiment(&config, Execution::default()).unwrap();
        assert!(outcome.artifacts.iter().any(|a| a.name == "summary.json"), "{text}");
        assert!(!outcome.summary.line().is_empty());
    }
}

#[test]
fn config_errors_carry_codes() {
    let err = ExperimentConfig::from_toml("name = \"x\"\n[run]\ntrials = 0\n").unwrap_err();
    assert_eq!(err.code(), "CONFIG_INVALID");
    assert!(err.to_string().contains("run.trials"));
    let err = ExperimentConfig::from_toml("name = \"x\"\nbogus = 1\n").unwrap_err();
    assert_eq!(err.code(), "CONFIG_INVALID");
    let base = small_echo(1);
    let err = experiment::sweep(&base, "model.nonexistent", &[1.0], Execution::default()).unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_VARIABLE");
}
