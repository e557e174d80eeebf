use std::io::Write;

use clap::Parser;

use rdm::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match cli::run(&args) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            // A closed pipe (e.g. `| head`) is not an error for the command itself.
            let _ = writeln!(std::io::stdout(), "{text}");
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
