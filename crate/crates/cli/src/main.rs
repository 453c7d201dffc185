use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "polarseg", version, about = "Coarse-to-fine polar instance segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of scenes; defaults to data.num_train.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write logs and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated in memory from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the AP report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write detections and overlay renders for a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of coarse-loss weights.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas; defaults to 0.3,0.4,...,1.0.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Print the parameter and multiply-accumulate manifest.
    Count {
        #[command(flatten)]
        common: Common,
        /// Use the full-scale heads (256 channels, 80 classes, P3-P7).
        #[arg(long)]
        full_scale: bool,
        #[arg(long, default_value_t = 800)]
        height: usize,
        #[arg(long, default_value_t = 1200)]
        width: usize,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoFine,
    NoHbb,
    ImplicitCoarse,
    DetachCoords,
    StandardConv,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated level strides, e.g. 4,8,16.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    rays: Option<usize>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
