//! Majority-vote disentanglement scoring. Each vote fixes one generative
//! factor, encodes a batch that varies the others, and asks which latent
//! dimension stayed most still; a code that isolates factors answers with
//! the same dimension every time.

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{attention_disentanglement_loss, DisentangleError};
use crate::attention::{attention_set, Sampling};
use crate::data::{FactorDataset, FactorSpec};
use crate::model::Vae;
use crate::util::derive_seed;

/// Anything that can map a dataset ordinal to a latent code.
pub trait CodeSource {
    fn latent_dim(&self) -> usize;
    fn code(&self, ordinal: usize) -> Array1<f64>;

    /// Batched encoding; the default loops, implementors may do better.
    fn codes(&self, ordinals: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ordinals.len(), self.latent_dim()));
        for (row, &o) in ordinals.iter().enumerate() {
            out.row_mut(row).assign(&self.code(o));
        }
        out
    }
}

/// Posterior means of a model over a rendered factor dataset.
pub struct VaeCodes<'a> {
    vae: &'a Vae,
    dataset: &'a FactorDataset,
}

impl<'a> VaeCodes<'a> {
    pub fn new(vae: &'a Vae, dataset: &'a FactorDataset) -> Result<Self, DisentangleError> {
        let cfg = &vae.config;
        if (cfg.input_h, cfg.input_w, cfg.input_c)
            != (dataset.resolution, dataset.resolution, 1)
        {
            return Err(DisentangleError::InvalidParameter(format!(
                "model expects {}x{}x{} input but the dataset renders {}x{}x1",
                cfg.input_h, cfg.input_w, cfg.input_c, dataset.resolution, dataset.resolution
            )));
        }
        Ok(VaeCodes { vae, dataset })
    }
}

impl CodeSource for VaeCodes<'_> {
    fn latent_dim(&self) -> usize {
        self.vae.config.latent_dim
    }

    fn code(&self, ordinal: usize) -> Array1<f64> {
        self.vae
            .encode_dist(&self.dataset.image(ordinal))
            .expect("resolution checked at construction")
            .mu
    }

    fn codes(&self, ordinals: &[usize]) -> Array2<f64> {
        let images: Vec<Array3<f64>> = ordinals
            .iter()
            .map(|&o| self.dataset.image(o))
            .collect();
        let batch = crate::model::stack_images(&images);
        let trace = self
            .vae
            .trace_batch(batch)
            .expect("resolution checked at construction");
        let mu = trace.mu.value();
        Array2::from_shape_fn((ordinals.len(), self.latent_dim()), |(r, c)| {
            mu[[r, c]]
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOpts {
    pub n_votes: usize,
    pub batch_per_vote: usize,
    /// Upper bound on the number of codes used to estimate per-dim spread.
    pub std_sample: usize,
}

impl Default for MetricOpts {
    fn default() -> Self {
        MetricOpts {
            n_votes: 500,
            batch_per_vote: 32,
            std_sample: 1024,
        }
    }
}

/// Votes and score of one metric run. `votes[(f, d)]` counts how often
/// latent dim `d` was the stillest while factor `f` was held fixed;
/// collapsed dims (zero spread over the dataset) are listed separately and
/// never voted for.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricOutcome {
    pub score: f64,
    pub votes: Array2<usize>,
    pub retained: Vec<usize>,
}

/// Metric plus the reconstruction error of the same model, the two axes a
/// capacity-vs-disentanglement scatter needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentanglementReport {
    pub score: f64,
    pub votes: Array2<usize>,
    pub reconstruction_error: f64,
}

fn random_ordinal(spec: &FactorSpec, rng: &mut ChaCha8Rng) -> usize {
    let factors: Vec<usize> = spec
        .cardinalities()
        .iter()
        .map(|&c| rng.random_range(0..c))
        .collect();
    spec.ordinal_of(&factors)
}

/// Runs the majority-vote protocol. Every random draw comes from streams
/// derived from `seed`, so the votes are exactly reproducible.
pub fn disentanglement_metric<S: CodeSource + ?Sized>(
    source: &S,
    spec: &FactorSpec,
    opts: &MetricOpts,
    seed: u64,
) -> Result<MetricOutcome, DisentangleError> {
    if opts.n_votes == 0 || opts.batch_per_vote < 2 {
        return Err(DisentangleError::InvalidParameter(
            "need at least one vote and a batch of at least 2".into(),
        ));
    }
    let d = source.latent_dim();
    let n_factors = spec.n_factors();

    let mut std_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "metric-std"));
    let pool: Vec<usize> = if spec.count() <= opts.std_sample {
        (0..spec.count()).collect()
    } else {
        (0..opts.std_sample)
            .map(|_| random_ordinal(spec, &mut std_rng))
            .collect()
    };
    let codes = source.codes(&pool);
    let mut stds = Vec::with_capacity(d);
    for col in 0..d {
        let column = codes.column(col);
        let mean = column.sum() / column.len() as f64;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / column.len() as f64;
        stds.push(var.sqrt());
    }
    let retained: Vec<usize> = (0..d).filter(|&i| stds[i] > 0.0).collect();
    if retained.is_empty() {
        return Err(DisentangleError::AllDimsCollapsed);
    }

    let mut votes = Array2::<usize>::zeros((n_factors, d));
    for k in 0..opts.n_votes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("metric-vote-{k}")));
        let fixed = rng.random_range(0..n_factors);
        let value = rng.random_range(0..spec.cardinalities()[fixed]);
        let ordinals: Vec<usize> = (0..opts.batch_per_vote)
            .map(|_| {
                let mut factors: Vec<usize> = spec
                    .cardinalities()
                    .iter()
                    .map(|&c| rng.random_range(0..c))
                    .collect();
                factors[fixed] = value;
                spec.ordinal_of(&factors)
            })
            .collect();
        let batch = source.codes(&ordinals);

        let mut best_dim = retained[0];
        let mut best_var = f64::INFINITY;
        for &dim in &retained {
            let column = batch.column(dim);
            let mean = column.sum() / column.len() as f64;
            let var = column
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / column.len() as f64
                / (stds[dim] * stds[dim]);
            if var < best_var {
                best_var = var;
                best_dim = dim;
            }
        }
        votes[[fixed, best_dim]] += 1;
    }

    let correct: usize = (0..d)
        .map(|dim| (0..n_factors).map(|f| votes[[f, dim]]).max().unwrap_or(0))
        .sum();
    Ok(MetricOutcome {
        score: correct as f64 / opts.n_votes as f64,
        votes,
        retained,
    })
}

/// Metric for a model, paired with its mean per-pixel squared
/// reconstruction error over a random sample of the dataset.
pub fn vae_disentanglement_report(
    vae: &Vae,
    dataset: &FactorDataset,
    opts: &MetricOpts,
    recon_sample: usize,
    seed: u64,
) -> Result<DisentanglementReport, DisentangleError> {
    let source = VaeCodes::new(vae, dataset)?;
    let outcome = disentanglement_metric(&source, &dataset.spec, opts, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "metric-recon"));
    let n = recon_sample.max(1);
    let mut err = 0.0;
    for _ in 0..n {
        let image = dataset.image(random_ordinal(&dataset.spec, &mut rng));
        let recon = vae.reconstruct(&image)?;
        let sq: f64 = image
            .iter()
            .zip(recon.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        err += sq / image.len() as f64;
    }
    Ok(DisentanglementReport {
        score: outcome.score,
        votes: outcome.votes,
        reconstruction_error: err / n as f64,
    })
}

/// Mean pairwise overlap of per-dimension attention maps over a sample of
/// images, the evaluation-time counterpart of the training penalty. Maps
/// come from the posterior mean, so the measurement is deterministic.
pub fn mean_pairwise_attention_overlap(
    vae: &Vae,
    images: &[Array3<f64>],
    layer: &str,
) -> Result<f64, DisentangleError> {
    let d = vae.config.latent_dim;
    if d < 2 {
        return Err(DisentangleError::TooFewDims(d));
    }
    if images.is_empty() {
        return Err(DisentangleError::InvalidParameter(
            "need at least one image to measure overlap".into(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for image in images {
        let maps = attention_set(vae, image, layer, Sampling::Mu, 0)?;
        for i in 0..d {
            for j in i + 1..d {
                total += attention_disentanglement_loss(maps[i].values(), maps[j].values())?;
                pairs += 1;
            }
        }
    }
    Ok(total / pairs as f64)
}
