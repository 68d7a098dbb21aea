//! `lbsguard` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lbsguard", version, about = "Privacy-preserving location-service simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for every random draw of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created when missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Mixing weight of the geographic kernel in pre-training walks.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Embedding width of the POE model.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Ranking cutoff for returned lists and metrics.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory with `train.tsv`, `validation.tsv`, `test.tsv`,
    /// `poi_meta.tsv` and `user_meta.tsv`. Without it the corpus is
    /// generated from the `[synth]` section.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted structure.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Filter a check-in file and split it per user in time order.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkins: PathBuf,
        #[arg(long)]
        poi_meta: Option<PathBuf>,
        #[arg(long)]
        user_meta: Option<PathBuf>,
    },
    /// Random walks and skip-gram POI embeddings.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the key-factor model on the training moves.
    TrainNpe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the next-POI model.
    TrainPoe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        /// Embedding checkpoint from `pretrain`.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Route the test requests through edge and cloud.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        npe: PathBuf,
        #[arg(long)]
        poe: PathBuf,
    },
    /// Full run: sweeps, reference models and simulation.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Test-split metrics of trained checkpoints.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        poe: PathBuf,
        #[arg(long)]
        npe: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `lbsguard --help` for usage");
            }
            ExitCode::from(e.code())
        }
    }
}
