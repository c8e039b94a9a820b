use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match dtain::cli::run(dtain::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
