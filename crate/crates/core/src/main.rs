use std::process::ExitCode;

use clap::Parser;
use vivo::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vivo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
