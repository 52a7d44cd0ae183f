use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hiercon_cli::Cli::parse();
    match hiercon_cli::run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
