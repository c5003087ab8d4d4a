//! Shared implementation of the `scenefuse`, `scenefuse-sim` and
//! `scenefuse-eval` binaries.

pub mod commands;
pub mod config;
pub mod repro;

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {detail}")]
    Input { path: PathBuf, detail: String },
    #[error("bad config file {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} acceptance check(s) failed")]
    ChecksFailed { failed: usize },
}

impl CliError {
    /// 2 for anything the caller got wrong (flags, files, config), 1 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } | CliError::Config { .. } => 2,
            CliError::Runtime(_) | CliError::ChecksFailed { .. } => 1,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// NDJSON logs on stderr; `level` is an env-filter directive.
pub fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Prints the error with a usage hint where it helps and returns the exit code.
pub fn report(err: &CliError, bin: &str) -> i32 {
    eprintln!("error: {err}");
    if err.exit_code() == 2 {
        eprintln!("\nFor more information, try '{bin} --help'.");
    }
    err.exit_code()
}
