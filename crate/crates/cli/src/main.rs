//! Command-line entry point tying dataset generation, training,
//! evaluation, ablation sweeps, attention export, and gradient checking
//! into reproducible runs. Exit code 0 means the requested operation
//! completed with every internal contract intact.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Attn(a) => commands::attn(a),
        Command::Gradcheck => commands::gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
