//! `vfa` command-line tool.
//!
//! Exit codes: 0 success, 1 internal error or failed check, 2 bad input
//! or path, 3 shape or file-format error.

mod args;
mod commands;
mod pgm;

use std::process::ExitCode;

use clap::Parser;
use vfa::VfaError;

use args::{Cli, Command};

fn exit_code(e: &VfaError) -> u8 {
    match e {
        VfaError::Io { .. } | VfaError::Input(_) | VfaError::Usage(_) | VfaError::Parameter(_) => 2,
        VfaError::Dimension { .. } | VfaError::Parse { .. } | VfaError::Corrupt(_) | VfaError::Tensor(_) => 3,
        VfaError::NonFinite(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Register(a) => commands::register(a),
        Command::Warp(a) => commands::warp(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
