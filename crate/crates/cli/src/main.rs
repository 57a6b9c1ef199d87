//! `mlpreg`: dataset synthesis, training, registration, evaluation,
//! ablation suites and cost benchmarks from one configuration file.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors,
//! 2 on runtime errors.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mlpreg", version, about = "Multi-window MLP deformable registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration document; omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; every artifact is written below it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the data and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic pairs as MVD files plus a generator manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes a checkpoint and the training curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Register one stored pair; writes field.mvd, warped.mvd and metrics.csv.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Checkpoint directory; an untrained model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation suite: full_res_vs_stride4, block_swap, first_stage_conv, lambda_sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
        /// Comma-separated block kinds (block_swap only).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
    },
    /// Cost-model crossover table and scaling exponents.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
