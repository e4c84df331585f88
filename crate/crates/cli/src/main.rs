use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evacflow::workflow::{self, ExperimentConfig, Manifest};
use evacflow::Error;

const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

/// Evacuation traffic forecasting experiments.
///
/// Every command reads the experiment config and writes its artifacts, with
/// a manifest.json, into a subdirectory of the output directory.
#[derive(Debug, Parser)]
#[command(name = "evacflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON). Defaults to the bundled config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config run count.
    #[arg(long, global = true)]
    runs: Option<usize>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario into data/.
    Synth,
    /// Quality-control and impute detector data into clean/.
    IngestDetectors,
    /// Disaggregate movement records to hourly detector flows in movement/.
    IngestMovement,
    /// Build traffic and evacuation features into features/.
    BuildFeatures,
    /// Train forecasters on regular traffic into model/.
    Train,
    /// Train transfer models on evacuation traffic into transfer/.
    Transfer,
    /// Score trained models on their test windows into eval/.
    Evaluate,
    /// Write test-window predictions into predict/.
    Predict,
    /// Summarize eval/ into report/.
    Report,
    /// Run every step from synth to report.
    RunAll,
    /// Print the resolved config.
    Config,
}

fn load(cli: &Cli) -> evacflow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_json(DEFAULT_CONFIG, Path::new("default.json"))?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(runs) = cli.runs {
        cfg.runs = runs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> evacflow::Result<Vec<Manifest>> {
    let cfg = load(cli)?;
    let step = match cli.command {
        Command::Synth => workflow::synth,
        Command::IngestDetectors => workflow::ingest_detectors,
        Command::IngestMovement => workflow::ingest_movement,
        Command::BuildFeatures => workflow::build_features,
        Command::Train => workflow::train,
        Command::Transfer => workflow::transfer,
        Command::Evaluate => workflow::evaluate,
        Command::Predict => workflow::predict,
        Command::Report => workflow::report,
        Command::RunAll => return workflow::run_all(&cfg),
        Command::Config => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(Vec::new());
        }
    };
    Ok(vec![step(&cfg)?])
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifests) => {
            for m in manifests {
                for out in &m.outputs {
                    eprintln!("{}: wrote {out}", m.command);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
