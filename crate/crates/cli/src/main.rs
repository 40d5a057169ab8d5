//! `covidscreen`: data preparation, training, evaluation, explanation and serving.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod args;
mod data_cmd;
mod misc_cmd;
mod model_cmd;
mod run_config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, DataCommand};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Data(DataCommand::Scan(a)) => data_cmd::scan(&a),
        Command::Data(DataCommand::Validate(a)) => data_cmd::validate(&a),
        Command::Data(DataCommand::Split(a)) => data_cmd::split(&a),
        Command::Preprocess(a) => misc_cmd::preprocess(&a),
        Command::Train(a) => model_cmd::train(&a),
        Command::Eval(a) => model_cmd::eval(&a),
        Command::Predict(a) => model_cmd::predict(&a),
        Command::Cam(a) => model_cmd::cam(&a),
        Command::Roc(a) => misc_cmd::roc(&a),
        Command::Serve(a) => misc_cmd::serve(&a),
        Command::InitCheckpoint(a) => model_cmd::init_checkpoint(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("COVIDSCREEN_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
