//! `posebench` command-line front end.

use std::ffi::OsString;
use std::fmt::Display;

use clap::Parser;
use thiserror::Error;

pub mod bench;
mod commands;
pub mod report;

pub use commands::Cli;

pub const THREADS_ENV: &str = "POSEBENCH_THREADS";

/// A domain error labelled with the stage it came from.
#[derive(Debug, Error, PartialEq)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(stage: impl Into<String>, message: impl Display) -> Self {
        Self {
            stage: stage.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) trait Staged<T> {
    fn at(self, stage: &str) -> Result<T, CliError>;
}

impl<T, E: Display> Staged<T> for Result<T, E> {
    fn at(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, e))
    }
}

/// Parses `POSEBENCH_THREADS`; unset or empty means no cap.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::new(
                "config",
                format!("{THREADS_ENV} must be a positive integer, got '{v}'"),
            )),
        },
        _ => Ok(None),
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// domain error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let result = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            // Fails only if the global pool already exists, e.g. in tests.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        commands::execute(cli.command, cap)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
