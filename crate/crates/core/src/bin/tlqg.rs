use std::process::ExitCode;

use clap::Parser;
use tlqg_core::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(outcome) => {
            for path in &outcome.written {
                eprintln!("wrote {}", path.display());
            }
            if outcome.status.code() == 0 {
                println!("{}", outcome.message);
            } else {
                eprintln!("error: {}", outcome.message);
            }
            outcome.status.code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.status().code()
        }
    };
    ExitCode::from(code as u8)
}
