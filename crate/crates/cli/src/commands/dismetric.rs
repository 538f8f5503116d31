//! `vaemap dismetric`: measure a saved model's disentanglement on the factor
//! grid: the majority-vote score, the vote matrix behind it, reconstruction
//! error, and the mean pairwise overlap of its attention maps.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vaemap_core::disentangle::{mean_pairwise_attention_overlap, vae_disentanglement_report};
use vaemap_core::util::{atomic_write, derive_seed};

use crate::config::{RunConfig, SourceKind};
use crate::dataset::shapes_dataset;
use crate::error::CliError;
use crate::manifest::RunContext;

#[derive(Debug, Serialize)]
struct MetricReport {
    score: f64,
    reconstruction_error: f64,
    mean_pairwise_overlap: f64,
    /// `votes[f][d]`: how often latent dim `d` won while factor `f` was fixed.
    votes: Vec<Vec<usize>>,
}

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("dismetric", config)?;
    let seed = ctx.config.run.seed;

    if ctx.config.data.source != SourceKind::Shapes {
        return Err(CliError::Config(
            "dismetric evaluates on the factor grid: set [data] source = \"shapes\"".into(),
        ));
    }
    let vae = super::load_checkpoint(&mut ctx, "dismetric")?;
    let dataset = shapes_dataset(&ctx.config.data, seed)?;

    let metric_opts = ctx.config.disentangle.metric_opts();
    let report = vae_disentanglement_report(
        &vae,
        &dataset,
        &metric_opts,
        ctx.config.disentangle.eval_images,
        derive_seed(seed, "dismetric"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dismetric-images"));
    let images: Vec<_> = (0..ctx.config.disentangle.eval_images.max(1))
        .map(|_| dataset.image(rng.random_range(0..dataset.spec.count())))
        .collect();
    let layer = ctx.config.attention.layer_for(&vae.config);
    let overlap = mean_pairwise_attention_overlap(&vae, &images, &layer)?;

    let votes = (0..report.votes.nrows())
        .map(|f| report.votes.row(f).to_vec())
        .collect();
    let out = MetricReport {
        score: report.score,
        reconstruction_error: report.reconstruction_error,
        mean_pairwise_overlap: overlap,
        votes,
    };
    let path = ctx.out_file("dismetric.json");
    atomic_write(&path, &serde_json::to_vec_pretty(&out).expect("report serializes"))?;

    ctx.finish()
}
