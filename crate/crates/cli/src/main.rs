mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "macformer", version, about = "Train and evaluate a map-agent coupled trajectory predictor")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for scenario-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Axis {
    Mask,
    Noise,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic scenario corpus.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a scenario directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_couple_loss: bool,
        #[arg(long)]
        no_capture_loss: bool,
    },
    /// Predict one scenario file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Predict every agent observed at the last history step.
        #[arg(long)]
        joint: bool,
    },
    /// Metrics on a labeled scenario directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Metrics under masked or noisy history.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Ascending levels starting at 0, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
    },
    /// Parameter counts and forward latency.
    Bench {
        /// Also run the stack-attention fusion.
        #[arg(long)]
        compare_fusion: bool,
        #[arg(long, default_value_t = 100)]
        passes: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
