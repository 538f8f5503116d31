//! The `vaemap` command line: reproducible training, attention rendering,
//! localization scoring, and disentanglement runs, each leaving a locked run
//! directory with a resolved config snapshot and a manifest of everything it
//! read and wrote.

pub mod args;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

pub use args::{Cli, Command};
pub use config::{Overrides, RunConfig};
pub use error::CliError;

/// Resolves the config and dispatches to the subcommand. Returns the path
/// of the manifest the run wrote.
pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let config = cli.command.args().resolve()?;
    match cli.command {
        Command::Train(_) => commands::train::run(config),
        Command::Attend(_) => commands::attend::run(config),
        Command::Localize(_) => commands::localize::run(config),
        Command::Distrain(_) => commands::distrain::run(config),
        Command::Dismetric(_) => commands::dismetric::run(config),
        Command::Demo(_) => commands::demo::run(config),
        Command::GenData(_) => commands::gen_data::run(config),
    }
}
