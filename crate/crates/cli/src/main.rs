//! `rbhomog`: snapshot generation, surrogate training, evaluation and
//! two-scale runs driven by a TOML configuration.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbhomog_core::Error;

use crate::config::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration, missing inputs or provenance mismatch.
    Config(String),
    /// A numerical solve or fit failed.
    Solver(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvertedElement { .. }
            | Error::Divergence { .. }
            | Error::LinearSolve(_)
            | Error::PerturbationFailed { .. }
            | Error::MacroStep { .. }
            | Error::SnapshotFailed { .. }
            | Error::DegenerateData(_)
            | Error::IllConditioned(_)
            | Error::FitFailed(_) => CliError::Solver(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "rbhomog",
    version,
    about = "Reduced basis surrogates for computational homogenization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed of the uniform test sample.
    #[arg(long)]
    seed: Option<u64>,
    /// Ignore provenance mismatches and overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the RVE at the training and test points.
    Generate(Common),
    /// Build the basis and fit the coefficient regressors.
    Train(Common),
    /// Error tables of the trained model on the test set.
    Evaluate(Common),
    /// Cook's membrane with the nested RVE and/or the surrogate.
    Twoscale(Common),
    /// Summarize the contents of the output directory.
    Report(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, cmd): (&Common, fn(&commands::Context) -> Result<(), CliError>) =
        match &cli.command {
            Command::Generate(c) => (c, commands::generate),
            Command::Train(c) => (c, commands::train),
            Command::Evaluate(c) => (c, commands::evaluate),
            Command::Twoscale(c) => (c, commands::twoscale),
            Command::Report(c) => (c, commands::report),
        };
    let overrides = Overrides {
        out: common.out.clone(),
        workers: common.workers,
        seed: common.seed,
    };
    let cfg = config::load(&common.config, &overrides)?;
    if cfg.workers > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    let _lock = manifest::DirLock::acquire(&cfg.output)?;
    cmd(&commands::Context {
        cfg,
        force: common.force,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rbhomog: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
