use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlpe_core::exec::{configure_threads, Execution};
use nlpe_core::experiment::{self, ExperimentConfig, ExperimentError, Outcome};

const BUNDLED: [(&str, &str); 6] = [
    ("paper-nlpe", include_str!("../configs/paper-nlpe.toml")),
    ("paper-qubit", include_str!("../configs/paper-qubit.toml")),
    ("paper-decay-tau2", include_str!("../configs/paper-decay-tau2.toml")),
    ("paper-decay-tau3", include_str!("../configs/paper-decay-tau3.toml")),
    ("rose-comparison", include_str!("../configs/rose-comparison.toml")),
    ("afc-baseline", include_str!("../configs/afc-baseline.toml")),
];

/// Photon-echo memory simulator: runs a configured experiment and writes
/// CSV/JSON artifacts with a hashed manifest.
#[derive(Parser, Debug)]
#[command(name = "nlpe", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Config file, or the name of a bundled config.
    #[arg(long, default_value = "paper-nlpe")]
    config: String,

    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides output.directory).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Sweep a dotted config key: KEY=START:STOP:N.
    #[arg(long)]
    sweep: Option<String>,

    #[arg(long)]
    quiet: bool,

    /// Worker threads for the data-parallel core.
    #[arg(long, env = "NLPE_THREADS", hide = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Checks the manifest hashes in an output directory.
    Verify { dir: PathBuf },
    /// Lists the bundled configs.
    List,
}

fn load_config(name: &str) -> Result<ExperimentConfig, ExperimentError> {
    if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == name) {
        return ExperimentConfig::from_toml(text);
    }
    let text = std::fs::read_to_string(name)
        .map_err(|e| ExperimentError::IoFailure { path: name.to_string(), reason: e.to_string() })?;
    ExperimentConfig::from_toml(&text)
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>), ExperimentError> {
    let bad = |reason: &str| ExperimentError::ConfigInvalid { key: "--sweep".into(), reason: reason.into() };
    let (key, range) = spec.split_once('=').ok_or_else(|| bad("expected KEY=START:STOP:N"))?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("expected KEY=START:STOP:N"));
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad("START is not a number"))?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad("STOP is not a number"))?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad("N is not a count"))?;
    if n == 0 {
        return Err(bad("grid is empty"));
    }
    Ok((key.trim().to_string(), experiment::linear_grid(start, stop, n)))
}

fn write_sweep(dir: &Path, name: &str, csv: String) -> Result<(), ExperimentError> {
    let outcome = Outcome {
        summary: experiment::Summary { name: name.to_string(), ..Default::default() },
        artifacts: vec![experiment::Artifact { name: "sweep.csv".into(), contents: csv }],
    };
    experiment::write_artifacts(dir, &outcome).map(|_| ())
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let execution = Execution::default();
    match cli.command {
        Some(Command::Verify { dir }) => {
            let bad = experiment::verify_manifest(&dir)?;
            if let Some(first) = bad.first() {
                return Err(ExperimentError::IoFailure { path: first.clone(), reason: "hash mismatch".into() });
            }
            if !cli.quiet {
                println!("manifest ok: {}", dir.display());
            }
            return Ok(());
        }
        Some(Command::List) => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            return Ok(());
        }
        None => {}
    }

    let mut config = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    let out = cli.out.clone().or_else(|| config.output.directory.clone());

    if let Some(spec) = &cli.sweep {
        let (key, grid) = parse_sweep(spec)?;
        let rows = experiment::sweep(&config, &key, &grid, execution)?;
        let csv = experiment::sweep_csv(&key, &rows);
        match &out {
            Some(dir) => write_sweep(dir, &config.name, csv)?,
            None => print!("{csv}"),
        }
        return Ok(());
    }

    let outcome = experiment::run_experiment(&config, execution)?;
    if let Some(dir) = &out {
        experiment::write_artifacts(dir, &outcome)?;
    }
    if !cli.quiet {
        println!("{}", outcome.summary.line());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        configure_threads(threads.max(1));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}
