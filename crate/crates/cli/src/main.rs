use std::process::ExitCode;

use attnlab_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("attnlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
