//! `npeff`: every pipeline stage as a batch subcommand.
//!
//! Exit status is 0 on success, 1 when a stage fails (I/O, format, numerics)
//! and 2 on usage errors.

mod commands;
mod instance;
mod settings;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npeff::NpeffError;
use thiserror::Error;

use commands::{evaluate, factor, gen, perturb, report};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Npeff(#[from] NpeffError),
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "npeff", version, about = "Non-negative per-example Fisher factorization pipeline")]
struct Cli {
    /// JSON file of defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sandbox instance and write its PEFs.
    GenPefs(gen::GenArgs),
    /// Factor a PEF set into coefficients and components.
    Decompose(factor::DecomposeArgs),
    /// Fit coefficients for a PEF set against frozen components.
    Fit(factor::FitArgs),
    /// Add components specialized to a filtered PEF set.
    Expand(factor::ExpandArgs),
    /// Keep the examples with the given labels or ids.
    Filter(factor::FilterArgs),
    /// Build a component-targeted parameter perturbation.
    Perturb(perturb::PerturbArgs),
    /// Per-component selectivity and comparison metrics.
    Evaluate(evaluate::EvaluateArgs),
    /// Top-example listings and coefficient histograms.
    Report(report::ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenPefs(_) => "gen-pefs",
            Command::Decompose(_) => "decompose",
            Command::Fit(_) => "fit",
            Command::Expand(_) => "expand",
            Command::Filter(_) => "filter",
            Command::Perturb(_) => "perturb",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

/// Worker count and reduction mode shared by the factorizing subcommands.
#[derive(Args, Clone)]
pub struct ParallelArgs {
    /// Worker threads for the sharded reductions.
    #[arg(long, env = "NPEFF_WORKERS")]
    workers: Option<usize>,
    /// Reduce shards in a fixed order so results do not depend on --workers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

impl ParallelArgs {
    pub fn resolve(&self, settings: &settings::Settings) -> Result<(usize, bool), CliError> {
        let workers = settings.pick(self.workers, "workers", 1)?;
        if workers == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        Ok((workers, settings.pick(self.deterministic, "deterministic", true)?))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = settings::Settings::load(cli.config.as_deref(), cli.command.name())?;
    match &cli.command {
        Command::GenPefs(args) => gen::run(args, &settings),
        Command::Decompose(args) => factor::decompose(args, &settings),
        Command::Fit(args) => factor::fit(args, &settings),
        Command::Expand(args) => factor::expand(args, &settings),
        Command::Filter(args) => factor::filter(args, &settings),
        Command::Perturb(args) => perturb::run(args, &settings),
        Command::Evaluate(args) => evaluate::run(args, &settings),
        Command::Report(args) => report::run(args, &settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests also arrive here, with exit code 0
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
