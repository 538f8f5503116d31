use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = vaemap_cli::Cli::parse();
    match vaemap_cli::run(cli) {
        Ok(manifest) => {
            println!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
