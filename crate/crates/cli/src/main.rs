//! `enroute` command-line tool.
//!
//! Exit codes: 0 success, 2 config error (including bad flags), 3 data or
//! I/O error, 4 numeric failure, 5 transport failure.

mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::config::FileConfig;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| commands::run(cli.command, file));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("enroute: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
