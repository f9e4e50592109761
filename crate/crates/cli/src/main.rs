mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use priorattn::Error;

use args::{Cli, Command};
use commands::Status;

const EXIT_VALIDATION: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::InvalidParameter(_) | Error::InvalidSpec(_) | Error::Validation(_) => EXIT_VALIDATION,
        Error::Divergence { .. } | Error::DegenerateInput(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Attend(a) => commands::attend(a),
        Command::BaseTrain(a) => commands::base_train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(EXIT_NUMERIC),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
