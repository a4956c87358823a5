//! `gfa-defense`: trains models under each strategy, runs attack sweeps on
//! the shared correctly-classified set, and writes GFA, landscape and
//! gradient-decomposition reports as CSV and JSON.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gfa-defense", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "gfa-out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the number of training repetitions.
    #[arg(long, global = true)]
    repetitions: Option<usize>,

    /// Worker threads for attacks and measurements.
    #[arg(long, global = true, env = "GFA_DEFENSE_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per strategy and repetition.
    Train,
    /// Run every attack cell on the shared eligible test set.
    Attack,
    /// Per-layer alignment on the training and test subsets.
    GfaReport,
    /// Loss grids around test samples for two models on shared directions.
    Landscape {
        /// Test-subset index; by default the configured number of samples
        /// classified correctly by both models.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
    },
    /// Radial/tangential split of the input gradient on test samples.
    Decompose,
}

/// Failures with a dedicated exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Missing(Vec<PathBuf>),
    Numeric(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid config: {m}"),
            Failure::Missing(paths) => {
                write!(f, "missing artifacts:")?;
                for p in paths {
                    write!(f, " {}", p.display())?;
                }
                Ok(())
            }
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Missing(_) => 3,
                Failure::Numeric(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<gfa_core::Error>() {
            return match e {
                gfa_core::Error::Diverged { .. } => 4,
                gfa_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let path = cli
        .config
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut loaded = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
    }
    if let Some(r) = cli.repetitions {
        loaded.config.repetitions = r;
    }
    loaded.config.validate()?;
    let ctx = commands::Context::new(loaded, &cli.out, cli.threads.max(1))?;
    match cli.command {
        Command::Train => commands::train(&ctx),
        Command::Attack => commands::attack(&ctx),
        Command::GfaReport => commands::gfa_report(&ctx),
        Command::Landscape { sample, repetition } => commands::landscape(&ctx, sample, repetition),
        Command::Decompose => commands::decompose(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
