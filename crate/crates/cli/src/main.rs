//! `mpt`: experiment runner for masked pre-training and marginal likelihood.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mpt", version, about = "Masked pre-training vs. marginal likelihood experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON settings file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the settings file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its generating parameters.
    GenData(Common),
    /// Spread of the cumulative and fixed-rate estimators against mask count.
    Convergence(Common),
    /// Train linear-Gaussian models with the MPT objective.
    Train(Common),
    /// Train the Bernoulli linear model with MPT and with the ELBO.
    TrainBernoulli(Common),
    /// Score curves and areas for parameter checkpoints.
    Curve(Common),
    /// Area under an externally produced score curve.
    AreaImport {
        #[command(flatten)]
        common: Common,
        /// Curve CSV with header `mask_size,rate,score_mean,score_stderr`.
        #[arg(long)]
        file: PathBuf,
        /// Number of tokens; inferred from the last row when omitted.
        #[arg(long)]
        dim: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => commands::gen_data::run(c),
        Command::Convergence(c) => commands::convergence::run(c),
        Command::Train(c) => commands::train::run(c),
        Command::TrainBernoulli(c) => commands::bernoulli::run(c),
        Command::Curve(c) => commands::curve::run(c),
        Command::AreaImport { common, file, dim } => commands::curve::run_import(common, file, *dim),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(config::exit_code(&e))
        }
    }
}
