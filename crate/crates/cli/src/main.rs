//! `kgs4`: preprocessing, synthetic data, pre-training, fine-tuning, sweeps
//! and reports from the command line.

mod commands;
mod config;
mod data;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kgs4::training::SweepAxis;

use commands::{RunContext, SweepArgs};

/// A bad flag, config field or argument combination. Exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "kgs4", version, about = "Knowledge-guided S4 pre-training for EEG")]
struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run writes to `<out>/<experiment_id>`.
    #[arg(long, global = true, env = "KGS4_OUT", default_value = "runs")]
    out: PathBuf,
    /// Worker threads for per-sample parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Notch, bandpass, detrend, normalize and resample every ERF file in a directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a synthetic band-dominant corpus and a two-class task as ERF files.
    Synth,
    /// Ground-truth band power of every chunk, as CSV.
    Bandpower {
        #[arg(long)]
        input: PathBuf,
    },
    /// Pre-train on a directory of preprocessed ERF recordings.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Cross-validated fine-tuning on annotated ERF recordings.
    Finetune {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat pre-training or fine-tuning over data fractions.
    Sweep {
        /// `finetune_fraction` or `pretrain_fraction`.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated fractions, e.g. `1.0,0.5,0.3,0.1`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pre-training corpus, for `pretrain_fraction` sweeps.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Tables and plots from every results CSV under a directory.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(UsageError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let loaded = config::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(loaded.config.train.seed);
    let ctx = RunContext { loaded, out_root: cli.out, seed, args: std::env::args().skip(1).collect() };
    match &cli.command {
        Command::Preprocess { input } => commands::preprocess(&ctx, input),
        Command::Synth => commands::synth(&ctx),
        Command::Bandpower { input } => commands::bandpower(&ctx, input),
        Command::Pretrain { corpus } => commands::pretrain_cmd(&ctx, corpus),
        Command::Finetune { task, checkpoint } => commands::finetune_cmd(&ctx, task, checkpoint.as_deref()),
        Command::Sweep { axis, values, task, checkpoint, corpus } => commands::sweep_cmd(
            &ctx,
            SweepArgs { axis: *axis, values, task, checkpoint: checkpoint.as_deref(), corpus: corpus.as_deref() },
        ),
        Command::Report { results } => commands::report(&ctx, results),
    }
}

/// 1 usage or config error, 2 data error, 3 numerical divergence.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(k) = cause.downcast_ref::<kgs4::Error>() {
            return match k {
                kgs4::Error::Divergence { .. } => 3,
                kgs4::Error::Parameter(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
