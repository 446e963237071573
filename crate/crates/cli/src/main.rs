//! `tiltflow` command-line driver.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

/// Why a command failed, which decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(tiltflow::Error),
}

impl From<tiltflow::Error> for Failure {
    fn from(e: tiltflow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
