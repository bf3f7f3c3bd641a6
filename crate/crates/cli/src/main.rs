mod args;
mod commands;
mod manifest;
mod tables;

use std::process::ExitCode;

use clap::Parser;
use gridcascade::{CaseError, DatasetError, SimError};
use gridcascade_model::ModelError;

use args::{Cli, Command};

/// Bad user input detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

/// 1 for input or configuration problems, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<CaseError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            if matches!(e, ModelError::Config(_) | ModelError::StatsMismatch { .. } | ModelError::NotMultiRound) {
                return 1;
            }
        }
        if let Some(SimError::Config(_)) = cause.downcast_ref::<SimError>() {
            return 1;
        }
        if let Some(DatasetError::BadFractions(_)) = cause.downcast_ref::<DatasetError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::PfSolve(a) => commands::pf_solve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
