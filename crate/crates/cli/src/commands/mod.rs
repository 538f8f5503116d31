//! One module per subcommand. Each takes a resolved [`RunConfig`], works
//! inside a locked run directory, and returns the manifest path.
//!
//! [`RunConfig`]: crate::config::RunConfig

pub mod attend;
pub mod demo;
pub mod dismetric;
pub mod distrain;
pub mod gen_data;
pub mod localize;
pub mod train;

use std::path::Path;

use vaemap_core::model::{Checkpoint, Vae};
use vaemap_core::util::atomic_write;

use crate::error::CliError;
use crate::manifest::RunContext;

/// Loads the checkpoint named in `[model] checkpoint`, recording its digest
/// as an input.
fn load_checkpoint(ctx: &mut RunContext, command: &str) -> Result<Vae, CliError> {
    let path = ctx
        .config
        .model
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config(format!("{command} needs [model] checkpoint")))?;
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    ctx.checksum_input("checkpoint", &path)?;
    let ckpt = Checkpoint::load(&path)?;
    Ok(ckpt.model)
}

/// Writes the per-epoch loss curve of a training run.
fn write_loss_curve(
    path: &Path,
    curve: &[vaemap_core::model::EpochStats],
) -> Result<(), CliError> {
    let mut out = String::from("epoch,recon,kl,total\n");
    for row in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.epoch, row.recon, row.kl, row.total
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}
