use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = panu::cli::Cli::parse();
    ExitCode::from(panu::cli::run(cli, &mut std::io::stdout(), &mut std::io::stderr()))
}
