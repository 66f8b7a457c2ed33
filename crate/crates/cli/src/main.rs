//! `maskctc`: generate data, train, decode, score, analyze and average checkpoints.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 configuration or
//! compatibility error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "maskctc", version, about = "Non-autoregressive code-switching ASR")]
pub struct Cli {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a generated corpus.
    Train {
        /// Corpus directory (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints and the training log (default: paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a manifest with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Hypothesis JSON-lines output.
        #[arg(long)]
        out: PathBuf,
        /// CMLM iterations (overrides decode.iterations).
        #[arg(long)]
        iterations: Option<usize>,
        /// Masking threshold (overrides decode.p_thres).
        #[arg(long)]
        p_thres: Option<f64>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score hypotheses against a reference manifest.
    Score {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        /// Corpus directory holding the vocabulary and Pinyin table (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report JSON output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two systems: TER delta, McNemar and paired t-test.
    Analyze {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Average the top-k checkpoints of a directory by validation accuracy.
    AvgCkpt {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
