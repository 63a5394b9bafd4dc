//! Command-line front end for the gaitmorph pipeline.
//!
//! ```text
//! gaitmorph gen|train|fit-maps|morph|fgd|stats --config <file> [--set key=value ...]
//! ```
//!
//! Every report is a single-line JSON object on stdout. Exit codes: 0 ok,
//! 2 numeric divergence, 64 usage or configuration, 65 bad data, 66
//! artifacts that do not belong together.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;

pub use commands::{cmd_fgd, cmd_fit_maps, cmd_gen, cmd_morph, cmd_stats, cmd_train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_MISMATCH: i32 = 66;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "GAITMORPH_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<gaitmorph::Error> for CliError {
    fn from(e: gaitmorph::Error) -> Self {
        use gaitmorph::Error as E;
        let code = match &e {
            E::Divergence { .. } => EXIT_DIVERGENCE,
            E::StaleMap { .. } => EXIT_MISMATCH,
            E::Config(_) | E::Parameter(_) | E::MissingFile(_) | E::Io(_) => EXIT_USAGE,
            E::Dimension(_)
            | E::NotPsd(_)
            | E::Infeasible(_)
            | E::DegenerateInput(_)
            | E::DegeneratePose(_)
            | E::MalformedRecord { .. }
            | E::Version { .. } => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gaitmorph", version, about = "Discrete gait tokens and optimal-transport morphing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fit.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train and test datasets.
    Gen(ConfigArgs),
    /// Train the autoencoder and codebook.
    Train(ConfigArgs),
    /// Fit per-position transport maps between two variations.
    FitMaps(ConfigArgs),
    /// Morph walks with fitted (or identity) maps.
    Morph(ConfigArgs),
    /// Frechet Gait Distance of raw and morphed walks to the target.
    Fgd(ConfigArgs),
    /// Compression, usage and transport statistics.
    Stats(ConfigArgs),
}

fn report(value: impl Serialize) -> Result<String, CliError> {
    serde_json::to_string(&value).map_err(|e| CliError::data(format!("report is not representable: {e}")))
}

/// Runs one subcommand and returns its JSON report line.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    use config::load_config;
    let load = |a: &ConfigArgs| (a.config.clone(), a.overrides.clone());
    match &cli.command {
        Command::Gen(a) => {
            let (p, o) = load(a);
            report(cmd_gen(&load_config(p.as_deref(), &o)?)?)
        }
        Command::Train(a) => {
            let (p, o) = load(a);
            report(cmd_train(&load_config(p.as_deref(), &o)?)?)
        }
        Command::FitMaps(a) => {
            let (p, o) = load(a);
            report(cmd_fit_maps(&load_config(p.as_deref(), &o)?)?)
        }
        Command::Morph(a) => {
            let (p, o) = load(a);
            report(cmd_morph(&load_config(p.as_deref(), &o)?)?)
        }
        Command::Fgd(a) => {
            let (p, o) = load(a);
            report(cmd_fgd(&load_config(p.as_deref(), &o)?)?)
        }
        Command::Stats(a) => {
            let (p, o) = load(a);
            report(cmd_stats(&load_config(p.as_deref(), &o)?)?)
        }
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))
}
