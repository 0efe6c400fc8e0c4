//! `soundtriage` command-line interface.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use soundtriage::inference::MetricKind;
use soundtriage::losses::LossKind;

#[derive(Debug, Parser)]
#[command(name = "soundtriage", version, about = "Priority-conditioned sound event detection")]
pub struct Cli {
    /// Run configuration (TOML, or a previous run's manifest.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Train a detector over random class weightings.
    Train(TrainArgs),
    /// Write detections for a dataset under one priority vector.
    Infer(PredictArgs),
    /// Detect and score a labelled dataset under one priority vector.
    Eval(PredictArgs),
    /// Score every class at each candidate target weight.
    Sweep(SweepArgs),
    /// Tune thresholds, median filters and target weights on validation data.
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Clip length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Per-class level offsets in dB, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub class_gain_db: Option<Vec<f64>>,
    /// Relative class frequencies, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub class_prevalence: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Dirichlet concentration.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Bypass the conditioner (conventional detector).
    #[arg(long)]
    pub identity_film: bool,
}

#[derive(Debug, Args)]
pub struct PriorityArgs {
    /// Raw priority vector, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["target", "weight"])]
    pub lambda: Option<Vec<f64>>,
    /// Class to prioritise.
    #[arg(long, requires = "weight")]
    pub target: Option<usize>,
    /// Raw weight of the target class (others get 1).
    #[arg(long, requires = "target")]
    pub weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub priority: PriorityArgs,
    /// Post-processing from `tune` (tuning.json) or a bare thresholds/median_sizes file.
    #[arg(long)]
    pub postprocess: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate raw target weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub postprocess: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub metric: Option<MetricKind>,
    /// Candidate raw target weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(out) = cli.out.clone() else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "--out <DIR> is required")
            .exit();
    };
    match commands::run(&cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
