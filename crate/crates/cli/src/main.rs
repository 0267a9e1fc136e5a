use std::process::ExitCode;

use clap::Parser;
use ghvit_cli::{config::DATA_DIR_ENV, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let data_dir = std::env::var(DATA_DIR_ENV).ok();
    match run(cli, data_dir.as_deref(), &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
