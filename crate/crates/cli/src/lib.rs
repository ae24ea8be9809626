//! The `ddc` command-line driver.

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

pub mod commands;
pub mod dataset;
pub mod settings;

use settings::{resolve, Cli, Command, FileConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = resolve(cli.seed, &file)?.seed;
    match cli.command {
        Command::Simulate(cmd) => commands::simulate(cmd, &file, seed),
        Command::Run(cmd) => commands::run(cmd, &file, seed),
        Command::Replay(cmd) => commands::replay(cmd, &file),
        Command::Report(cmd) => commands::report(cmd, &file),
        Command::CheckCondition(cmd) => commands::check_condition(cmd, &file),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
