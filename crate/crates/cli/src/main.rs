//! Command-line pipeline: synthetic data generation, dataset splitting,
//! training, evaluation, prediction and figure emission.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime/training failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phynow_core::error::Error;

use config::{ModelFlags, TrainFlags};

#[derive(Parser)]
#[command(name = "phynow", version, about = "Physics-disentangled precipitation nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic advection dataset of drifting Gaussian blobs.
    GenSynth {
        /// Output directory for PNG frames, index and metadata.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Frames per situation.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        blobs: usize,
        /// Velocity in px/step as "vx,vy" (x = rows, y = columns).
        #[arg(long, default_value = "1,0")]
        velocity: String,
        #[arg(long, default_value_t = 0.0)]
        diffusion: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of independent situations (separated by gap-hours).
        #[arg(long, default_value_t = 1)]
        situations: usize,
        #[arg(long, default_value_t = 25)]
        gap_hours: i64,
    },
    /// Split a dataset's rainy frames into independent situations and assign
    /// them to train/validation/test.
    Split {
        /// Dataset directory containing index.txt.
        #[arg(long)]
        data: PathBuf,
        /// Split ratios "train,validation,test"; default 0.72,0.127,0.153.
        #[arg(long = "data.ratios")]
        ratios: Option<String>,
        #[arg(long = "data.seed")]
        seed: Option<u64>,
        /// TOML config file; flags override its [data] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest path; defaults to <data>/split.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Split manifest; defaults to <data>/split.json.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss table output path.
        #[arg(long)]
        history: Option<PathBuf>,
        /// TOML config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Skip the per-epoch validation pass.
        #[arg(long, default_value_t = false)]
        no_validation: bool,
    },
    /// Evaluate a checkpoint on one split subset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Which subset to evaluate: train, validation or test.
        #[arg(long, default_value = "test")]
        subset: String,
        /// Output directory for report.csv and summary.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// TOML config file; flags override its [eval] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSI thresholds in dBZ.
        #[arg(long = "eval.thresholds_dbz", value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Rollout length; defaults to the checkpoint's tau_out.
        #[arg(long = "eval.tau_out")]
        tau_out: Option<usize>,
        /// Also evaluate the persistence baseline and emit a relative-change table.
        #[arg(long, default_value_t = false)]
        baseline: bool,
    },
    /// Forecast from a stored sequence and write the predicted frames.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Timestamp (YYYYMMDDHHMM) of the first input frame.
        #[arg(long)]
        start: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Rollout length; defaults to the checkpoint's tau_out.
        #[arg(long)]
        tau_out: Option<usize>,
    },
    /// Emit figures from a checkpoint.
    Plot {
        /// branches, advection or mae-curve.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// First input timestamp (branches/advection).
        #[arg(long)]
        start: Option<String>,
        /// Split manifest (mae-curve).
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Arrow stride in latent cells (advection).
        #[arg(long, default_value_t = 2)]
        stride: usize,
    },
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::InvalidKernel(_)
        | Error::InvalidOrder { .. }
        | Error::DomainTooSmall { .. }
        | Error::DimensionMismatch { .. }
        | Error::Arity { .. }
        | Error::InvalidConfig(_)
        | Error::InfeasibleSplit { .. }
        | Error::EmptyDataset
        | Error::Checkpoint(_)
        | Error::Data(_) => 2,
        Error::NonFiniteLoss { .. } | Error::Io(_) | Error::Image(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_of(&err))
        }
    }
}
