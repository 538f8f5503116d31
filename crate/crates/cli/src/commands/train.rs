//! `vaemap train`: assemble the one-class training split, train a VAE, and
//! save the checkpoint with its loss curve.

use std::path::PathBuf;

use vaemap_core::model::train_vae;
use vaemap_core::util::derive_seed;

use crate::config::{RunConfig, SourceKind};
use crate::dataset::{folder_root, load_train_test};
use crate::error::CliError;
use crate::manifest::RunContext;

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("train", config)?;
    let seed = ctx.config.run.seed;

    let (train, _test) = load_train_test(&ctx.config.data, None, seed)?;
    if ctx.config.data.source == SourceKind::Folder {
        let tree = folder_root(&ctx.config.data)?.join(&train.category);
        ctx.checksum_tree("dataset", &tree)?;
    }

    let sample = &train.samples()[0];
    let (h, w) = sample.resolution();
    let vae_config = ctx.config.model.vae_config(h, w, sample.channels());
    let opts = ctx.config.model.train_opts();

    let checkpoint = train_vae(&train, &vae_config, &opts, derive_seed(seed, "train"))?;

    let ckpt_path = ctx.out_file("model.ckpt");
    checkpoint.save(&ckpt_path)?;
    let curve_path = ctx.out_file("loss_curve.csv");
    super::write_loss_curve(&curve_path, &checkpoint.meta.loss_curve)?;

    ctx.finish()
}
