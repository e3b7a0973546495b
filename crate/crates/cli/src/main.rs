mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    // usage errors exit with 2, help and version with 0
    let cli = args::Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("cam: error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("cam: error: {msg}");
            ExitCode::from(1)
        }
    }
}
