//! `scvi`: simulate, train, evaluate, impute and test for differential
//! expression from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. Errors go to stderr as one JSON line.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "scvi", version, about = "Zero-inflated negative binomial VAE for single-cell counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one config value, e.g. `--set training.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw a synthetic dataset with known ground truth.
    Simulate,
    /// Fit the model and write a checkpoint and loss trace.
    Train,
    /// Held-out likelihood, clustering and QC metrics for a checkpoint.
    Eval,
    /// Corrupt counts, retrain, and score imputation of the zeroed entries.
    Impute,
    /// Bayes-factor differential expression between two labelled groups.
    De,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set thread count: {e}")))?;
    }
    let config = RunConfig::resolve(&Overrides {
        config: cli.config.as_deref(),
        set: &cli.set,
        seed: cli.seed,
        out: cli.out.as_deref(),
    })?;
    let ctx = Ctx {
        config,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Simulate => commands::simulate_cmd(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Impute => commands::impute_cmd(&ctx),
        Command::De => commands::de_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
