//! `dtl`: runs the three-stage transfer protocol from a TOML experiment file
//! and writes every report under one output directory.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error,
//! 3 training divergence, 4 I/O or data error, 5 output directory not empty.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(transfer_core::Error),

    #[error("output directory {} is not empty; pass --force to write into it", .0.display())]
    OutputExists(PathBuf),
}

impl From<transfer_core::Error> for CliError {
    fn from(e: transfer_core::Error) -> Self {
        match e {
            transfer_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use transfer_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::OutputExists(_) => 5,
            CliError::Core(e) => match e.root() {
                E::Config(_) => 2,
                E::Divergence { .. } => 3,
                E::Io { .. } | E::Data(_) | E::Checkpoint(_) => 4,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtl", version, about = "Three-stage freeze/unfreeze transfer learning on a micro ResNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on the source task, run stages I-III on every target fold,
    /// and the scratch baseline when the config has one.
    Run(RunArgs),
    /// Scratch baseline only, at the protocol's total fine-tuning epochs.
    Baseline(RunArgs),
    /// Learning-rate range test on one fold, or on the quadratic test surface.
    Lrfind(LrfindArgs),
    /// Render the synthetic source/target corpus as PGM directories.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fold worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct LrfindArgs {
    /// Experiment config; not needed with --quadratic.
    #[arg(long, required_unless_present = "quadratic")]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint instead of pretraining; a head of the wrong size is replaced.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub lo: f64,
    #[arg(long, default_value_t = 10.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Sweep every group instead of the head alone.
    #[arg(long)]
    pub unfreeze: bool,
    /// Sweep plain gradient descent on ½·LAMBDA·x² instead of a model.
    #[arg(long, value_name = "LAMBDA", conflicts_with_all = ["config", "checkpoint"])]
    pub quadratic: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Take corpus parameters from this experiment config; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source_classes: Option<usize>,
    #[arg(long)]
    pub target_classes: Option<usize>,
    #[arg(long)]
    pub source_per_class: Option<usize>,
    #[arg(long)]
    pub target_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Lrfind(a) => commands::lrfind(&a),
        Command::Gen(a) => commands::gen(&a),
    }
}
