//! Command-line surface. Flags shadow config-file keys; the merged result
//! is what a run snapshots and executes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vaemap_core::attention::{AnomalyMode, Sampling};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "vaemap",
    version,
    about = "Train convolutional VAEs and explain them with latent-gradient attention maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a one-class VAE and save its checkpoint.
    Train(RunArgs),
    /// Render per-dimension and aggregate attention maps for test images.
    Attend(RunArgs),
    /// Score pixel-level anomaly localization and write the report CSV.
    Localize(RunArgs),
    /// Train the attention-disentangled model on the factor grid.
    Distrain(RunArgs),
    /// Measure a saved model's disentanglement.
    Dismetric(RunArgs),
    /// Render the cross-digit attention panel.
    Demo(RunArgs),
    /// Write a generated dataset to disk.
    GenData(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attend(_) => "attend",
            Command::Localize(_) => "localize",
            Command::Distrain(_) => "distrain",
            Command::Dismetric(_) => "dismetric",
            Command::Demo(_) => "demo",
            Command::GenData(_) => "gen-data",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Attend(a)
            | Command::Localize(a)
            | Command::Distrain(a)
            | Command::Dismetric(a)
            | Command::Demo(a)
            | Command::GenData(a) => a,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder tap to read attention from (conv1, conv2, ...).
    #[arg(long)]
    pub layer: Option<String>,
    /// How the anomaly backpropagation target is formed.
    #[arg(long, value_enum)]
    pub mode: Option<ModeFlag>,
    /// Latent quantity behind per-dimension maps.
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingFlag>,
    /// Weight of the attention-overlap penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the total-correlation term.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Run directory; all outputs go under it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeFlag {
    SumMu,
    NormalDiff,
}

impl From<ModeFlag> for AnomalyMode {
    fn from(flag: ModeFlag) -> Self {
        match flag {
            ModeFlag::SumMu => AnomalyMode::SumMu,
            ModeFlag::NormalDiff => AnomalyMode::NormalDiff,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplingFlag {
    Z,
    Mu,
}

impl From<SamplingFlag> for Sampling {
    fn from(flag: SamplingFlag) -> Self {
        match flag {
            SamplingFlag::Z => Sampling::Z,
            SamplingFlag::Mu => Sampling::Mu,
        }
    }
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            layer: self.layer.clone(),
            mode: self.mode.map(Into::into),
            sampling: self.sampling.map(Into::into),
            lambda: self.lambda,
            gamma: self.gamma,
            out: self.out.clone(),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_into_overrides() {
        let cli = Cli::parse_from([
            "vaemap", "attend", "--seed", "5", "--layer", "conv2", "--mode", "normal-diff",
            "--sampling", "z", "--lambda", "0.5", "--gamma", "3", "--out", "runs/a",
        ]);
        assert_eq!(cli.command.name(), "attend");
        let overrides = cli.command.args().overrides();
        assert_eq!(overrides.seed, Some(5));
        assert_eq!(overrides.layer.as_deref(), Some("conv2"));
        assert_eq!(overrides.mode, Some(AnomalyMode::NormalDiff));
        assert_eq!(overrides.sampling, Some(Sampling::Z));
        assert_eq!(overrides.lambda, Some(0.5));
        assert_eq!(overrides.gamma, Some(3.0));
        assert_eq!(overrides.out.as_deref(), Some(std::path::Path::new("runs/a")));
    }

    #[test]
    fn gen_data_is_spelled_with_a_dash() {
        let cli = Cli::parse_from(["vaemap", "gen-data", "--out", "r"]);
        assert_eq!(cli.command.name(), "gen-data");
    }

    #[test]
    fn bad_mode_value_is_rejected() {
        assert!(Cli::try_parse_from(["vaemap", "attend", "--mode", "sideways"]).is_err());
    }
}
