use std::process::ExitCode;

use clap::Parser;
use crisp::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("crisp-error: usage-error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("crisp-error: {line}");
            ExitCode::FAILURE
        }
    }
}
