//! `ghcrnn` command-line front end.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error reported to the user together with the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    /// Bad invocation, invalid configuration or missing input: exit code 2.
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    /// Failure while running: exit code 3.
    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<ghcrnn::Error> for Failure {
    fn from(e: ghcrnn::Error) -> Self {
        use ghcrnn::Error::*;
        match e {
            Io { .. } | Parse { .. } | Parameter(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ghcrnn", version, about = "Spatio-temporal graph forecasting with learned hierarchical pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed (required, here or in the configuration file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Pooling sizes as `M1,M2`, or `none`.
    #[arg(long)]
    pub pooling: Option<String>,
    /// Hidden width of every recurrent cell.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Chebyshev order K.
    #[arg(long)]
    pub cheb_k: Option<usize>,
    /// Input window length.
    #[arg(long)]
    pub t_in: Option<usize>,
    /// Forecast horizon.
    #[arg(long)]
    pub t_out: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Windows per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Epochs over which teacher forcing decays to zero.
    #[arg(long)]
    pub teacher_decay: Option<usize>,
    /// Train/validation/test fractions, e.g. `0.7,0.1,0.2`.
    #[arg(long)]
    pub split: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic diffusion dataset (series.csv, edges.csv).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of nodes.
        #[arg(long)]
        nodes: Option<usize>,
        /// Number of time steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build a weighted graph from distances or from flows (graph.csv).
    BuildGraph {
        #[command(flatten)]
        common: Common,
        /// Series CSV; supplies node ids and, for dual_flow, the flows.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Unweighted edge list (dual_flow mode).
        #[arg(long)]
        edges: Option<PathBuf>,
        /// Pairwise distance list (gaussian mode).
        #[arg(long)]
        distances: Option<PathBuf>,
        /// `gaussian` or `dual_flow`.
        #[arg(long)]
        mode: Option<String>,
        /// Weights below this threshold are dropped (gaussian mode).
        #[arg(long)]
        kappa: Option<f64>,
        /// Kernel width; defaults to the standard deviation of the distances.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train a model (checkpoint.txt, history.csv).
    Train {
        #[command(flatten)]
        common: Common,
        /// Series CSV.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Weighted edge list.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Forecast the steps after the end of a series (predictions.csv).
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Series CSV.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Weighted edge list.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split (eval_report.csv).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Series CSV.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Weighted edge list.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Add a baseline row; `ha` is the historical average.
        #[arg(long)]
        baseline: Option<String>,
        /// Season length of the historical average, in steps.
        #[arg(long)]
        period: Option<usize>,
        /// Train/validation/test fractions used in training.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train several pooling settings under one budget (pool_sweep.csv).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Series CSV.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Weighted edge list.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Semicolon-separated settings, e.g. `none;15,8;20,10`.
        #[arg(long)]
        settings: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Time and memory benchmarks (bench_time.csv, bench_memory.csv).
    Bench {
        #[command(flatten)]
        common: Common,
        /// Node count of the timing benchmark.
        #[arg(long)]
        nodes: Option<usize>,
        /// Hidden width used by both benchmarks.
        #[arg(long)]
        bench_hidden: Option<usize>,
        /// Timed repetitions per configuration (at least 3).
        #[arg(long)]
        repetitions: Option<usize>,
        /// Comma-separated node counts of the memory estimate.
        #[arg(long)]
        memory_nodes: Option<String>,
    },
    /// Hard clusters of a trained assignment (clusters.csv).
    InspectPool {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Series CSV supplying node ids.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Weighted edge list.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
