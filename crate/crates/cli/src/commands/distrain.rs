//! `vaemap distrain`: train on the factor-grid shapes with the combined
//! objective (or its λ=0 baseline) and log the metric trace. The last CSV
//! row always carries a fresh (reconstruction error, metric) measurement,
//! one point for a capacity-versus-disentanglement scatter.

use std::path::PathBuf;

use vaemap_core::disentangle::{train_ad_factorvae, write_ad_log_csv};
use vaemap_core::util::derive_seed;

use crate::config::{RunConfig, SourceKind};
use crate::dataset::shapes_dataset;
use crate::error::CliError;
use crate::manifest::RunContext;

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("distrain", config)?;
    let seed = ctx.config.run.seed;

    if ctx.config.data.source != SourceKind::Shapes {
        return Err(CliError::Config(
            "distrain trains on the factor grid: set [data] source = \"shapes\"".into(),
        ));
    }
    let dataset = shapes_dataset(&ctx.config.data, seed)?;
    let res = dataset.resolution;
    let vae_config = ctx.config.model.vae_config(res, res, 1);
    let ad_config = ctx.config.disentangle.ad_config(&ctx.config.attention);
    let opts = ctx.config.disentangle.train_opts();

    let outcome = train_ad_factorvae(
        &dataset,
        &vae_config,
        &ad_config,
        &opts,
        derive_seed(seed, "distrain"),
    )?;

    let ckpt_path = ctx.out_file("model.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    let log_path = ctx.out_file("metrics.csv");
    write_ad_log_csv(&log_path, &outcome.log)?;

    ctx.finish()
}
