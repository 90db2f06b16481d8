//! `wit`: estimate on CSV data, run simulation studies, enumerate equivalent models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

mod args;
mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;
use wit_core::WitError;

use crate::args::{Cli, Command};
use crate::config::FileConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, input files or model specification.
    Usage(String),
    /// The numerics failed on otherwise valid input.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<WitError> for CliError {
    fn from(e: WitError) -> Self {
        let msg = e.to_string();
        match e {
            WitError::Schema(_)
            | WitError::Parse { .. }
            | WitError::Io(_)
            | WitError::Csv(_)
            | WitError::UnknownCase(_)
            | WitError::Spec(_)
            | WitError::Domain(_)
            | WitError::UndefinedRatio(_) => CliError::Usage(msg),
            WitError::Dimension(_)
            | WitError::DegenerateColumn(_)
            | WitError::Collinear(_)
            | WitError::Rank(_)
            | WitError::NoFirstStage
            | WitError::Numerical(_)
            | WitError::Identification(_) => CliError::Runtime(msg),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Estimate(a) => commands::estimate(a, &file, cli.verbose),
        Command::Simulate(a) => commands::simulate(a, &file, cli.verbose),
        Command::EnumerateDgps(a) => commands::enumerate(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
