use std::process::ExitCode;

use clap::Parser;
use mseg_cli::{exit_code, init_threads_from_env, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads_from_env().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mseg: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
