//! The `qsgp` command line: training, prediction, evaluation and estimator
//! diagnostics on top of `qsgp-core`.

pub mod args;
pub mod commands;
pub mod diagnose;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;
use qsgp_core::QsgpError;

use args::{Cli, Command};

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) => exit::DATA,
            CliError::Numeric(_) => exit::NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            // messages converted from the core already name their kind
            CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<QsgpError> for CliError {
    fn from(e: QsgpError) -> Self {
        match e {
            QsgpError::Unsupported(_) => CliError::Usage(e.to_string()),
            QsgpError::Numeric(_) | QsgpError::InvalidState(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qsgp: {e}");
            e.code()
        }
    }
}
