use std::process::ExitCode;

use clap::Parser;
use openlens_cli::cli::{dispatch, exit_code, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = dispatch(&cli);
    match &result {
        Ok(outcome) if outcome.failures > 0 => {
            eprintln!("openlens: {} sample(s) failed", outcome.failures)
        }
        Ok(_) => {}
        Err(e) => eprintln!("openlens: {e}"),
    }
    exit_code(&result)
}
