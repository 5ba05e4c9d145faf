//! `mcivid`: every pipeline stage as a subcommand, each appending a run
//! manifest next to its output.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use mcivid::Error;

use args::Cli;

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Pipeline(Error::Config(_)) => 2,
            Failure::Pipeline(Error::Numeric(_)) => 4,
            Failure::Pipeline(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "usage error: {msg}"),
            Failure::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mcivid: {f}");
            ExitCode::from(f.code())
        }
    }
}
