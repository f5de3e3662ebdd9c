//! `gemfuse` command-line entry point.
//!
//! Subcommands: `generate`, `preprocess`, `train`, `eval`, `report`, plus
//! `preset` for printing built-in configurations. All behaviour is driven by
//! a JSON config file; flags override file values which override defaults.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence, 1 internal error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_generate, cmd_preprocess, cmd_report, cmd_train};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<crate::dataeval::EvalError> for CliError {
    fn from(e: crate::dataeval::EvalError) -> Self {
        use crate::dataeval::EvalError::*;
        match e {
            InvalidInput(m) | Data(m) => CliError::Data(m),
            Preproc(p) => CliError::Data(p.to_string()),
            Tensor(t) => CliError::Internal(t.to_string()),
            Io(io) => CliError::Data(io.to_string()),
            Json(j) => CliError::Data(j.to_string()),
        }
    }
}

impl From<crate::preproc::PreprocError> for CliError {
    fn from(e: crate::preproc::PreprocError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "gemfuse",
    about = "Sensor-aware multi-modal fusion object detection testbed",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
        /// Override dataset.root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Align, blend, and corrupt sensor images in batch.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a detector and write a checkpoint plus the loss curve.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Override dataset.root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write eval.json.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the number of evaluation trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the corruption mode (none|blank|noise|rsh).
        #[arg(long)]
        corruption: Option<String>,
        /// Override the corruption target (a|b).
        #[arg(long)]
        target: Option<String>,
        /// Override dataset.root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render detection report images with the sensor-contribution bar.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test samples to render.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Override dataset.root.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print a built-in configuration (default|paper) as JSON.
    Preset {
        /// Which preset to print.
        name: String,
    },
}

fn load_config(common: &CommonArgs, data: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(root) = data {
        cfg.dataset.root = root.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, force, data } => {
            let cfg = load_config(&common, data.as_ref())?;
            cmd_generate(&cfg, force)
        }
        Command::Preprocess { common } => {
            let cfg = load_config(&common, None)?;
            cmd_preprocess(&cfg)
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common, data.as_ref())?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval { common, checkpoint, trials, corruption, target, data } => {
            let mut cfg = load_config(&common, data.as_ref())?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(mode) = corruption {
                cfg.corruption.mode = mode;
            }
            if let Some(t) = target {
                cfg.corruption.target = t;
            }
            cmd_eval(&cfg, &checkpoint).map(|_| ())
        }
        Command::Report { common, checkpoint, count, data } => {
            let cfg = load_config(&common, data.as_ref())?;
            cmd_report(&cfg, &checkpoint, count)
        }
        Command::Preset { name } => {
            let cfg = match name.as_str() {
                "default" => RunConfig::default(),
                "paper" => RunConfig::paper_preset(),
                other => {
                    return Err(CliError::Config(format!(
                        "unknown preset `{other}` (expected default|paper)"
                    )))
                }
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg)
                    .map_err(|e| CliError::Internal(e.to_string()))?
            );
            Ok(())
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gemfuse: {e}");
            e.exit_code()
        }
    }
}
