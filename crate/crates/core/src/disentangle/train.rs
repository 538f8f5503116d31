//! Alternating trainer: one optimizer step on the model against the
//! combined objective, then one on the discriminator against its
//! classification loss, with periodic frozen-snapshot evaluation of the
//! disentanglement metric and the attention overlap.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use vaemap_autodiff::{Arr, Var};

use super::{
    ad_factorvae_loss, discriminator_loss_graph, mean_pairwise_attention_overlap, permute_dims,
    vae_disentanglement_report, AdConfig, AdLossGraph, DisentangleError, MetricOpts,
    TcDiscriminator,
};
use crate::data::FactorDataset;
use crate::model::{Adam, Checkpoint, EpochStats, ModelError, TrainMeta, Vae, VaeConfig};
use crate::util::{atomic_write, derive_seed};

#[derive(Clone, Debug)]
pub struct AdTrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    /// Weight of the total-correlation term.
    pub gamma: f64,
    /// Discriminator hidden widths.
    pub disc_hidden: Vec<usize>,
    /// Train on a fixed random subset of this many images instead of the
    /// full factor grid.
    pub subset: Option<usize>,
    /// Steps between metric evaluations; the final step always evaluates.
    pub eval_every: usize,
    pub metric: MetricOpts,
    /// Images sampled per evaluation for overlap and reconstruction error.
    pub eval_images: usize,
}

impl Default for AdTrainOpts {
    fn default() -> Self {
        AdTrainOpts {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            disc_lr: 1e-4,
            gamma: 10.0,
            disc_hidden: vec![64, 64],
            subset: None,
            eval_every: 500,
            metric: MetricOpts::default(),
            eval_images: 8,
        }
    }
}

/// One evaluation row: the batch losses at that step plus the
/// frozen-snapshot measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct AdTrainRow {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub tc: f64,
    pub ad: f64,
    pub metric: f64,
    pub eval_overlap: f64,
    pub eval_recon: f64,
}

pub struct AdTrainOutcome {
    pub checkpoint: Checkpoint,
    pub discriminator: TcDiscriminator,
    pub log: Vec<AdTrainRow>,
}

fn pull_grads(graph_params: &BTreeMap<String, Var>, tape_grads: Vec<Option<Var>>) -> BTreeMap<String, Arr> {
    graph_params
        .keys()
        .zip(tape_grads)
        .map(|(name, g)| {
            let value = match g {
                Some(var) => var.value(),
                None => Arr::zeros(graph_params[name].value().raw_dim()),
            };
            (name.clone(), value)
        })
        .collect()
}

/// Trains a model with the combined objective on a factor dataset.
///
/// One seed fixes everything: subset choice, batch order, sampling noise,
/// permutations, and evaluation draws. Setting `lambda` to zero in the
/// config yields the plain FactorVAE baseline on an identical random
/// stream, so a paired run isolates the effect of the attention term.
pub fn train_ad_factorvae(
    dataset: &FactorDataset,
    config: &VaeConfig,
    ad_cfg: &AdConfig,
    opts: &AdTrainOpts,
    seed: u64,
) -> Result<AdTrainOutcome, DisentangleError> {
    config.validate().map_err(DisentangleError::Model)?;
    ad_cfg.validate(config.latent_dim)?;
    if (config.input_h, config.input_w, config.input_c)
        != (dataset.resolution, dataset.resolution, 1)
    {
        return Err(DisentangleError::Model(ModelError::ResolutionMismatch {
            expected: (config.input_h, config.input_w, config.input_c),
            got: (dataset.resolution, dataset.resolution, 1),
        }));
    }
    if opts.batch_size < 2 {
        return Err(DisentangleError::BatchTooSmall(opts.batch_size));
    }
    if opts.steps == 0 || opts.eval_every == 0 {
        return Err(DisentangleError::InvalidParameter(
            "steps and eval_every must be at least 1".into(),
        ));
    }

    let total = dataset.spec.count();
    let pool: Vec<usize> = match opts.subset {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subset"));
            let mut picks = rand::seq::index::sample(&mut rng, total, n).into_vec();
            picks.sort_unstable();
            picks
        }
        _ => (0..total).collect(),
    };

    let mut vae = Vae::init(config.clone(), derive_seed(seed, "init"))?;
    let mut disc = TcDiscriminator::init(
        config.latent_dim,
        &opts.disc_hidden,
        derive_seed(seed, "disc-init"),
    );
    let mut adam = Adam::new(opts.lr);
    let mut disc_adam = Adam::new(opts.disc_lr);
    let mut log = Vec::new();
    let mut curve = Vec::new();
    let mut last_good = vae.params.clone();

    for step in 0..opts.steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("batch-{step}")));
        let batch: Vec<Array3<f64>> = (0..opts.batch_size)
            .map(|_| dataset.image(pool[batch_rng.random_range(0..pool.len())]))
            .collect();

        let graph: AdLossGraph = ad_factorvae_loss(
            &vae,
            &disc,
            &batch,
            opts.gamma,
            ad_cfg,
            derive_seed(seed, &format!("noise-{step}")),
        )?;
        let parts = graph.components();
        if !parts.total.is_finite() {
            let ckpt = Checkpoint {
                model: Vae {
                    config: config.clone(),
                    params: last_good,
                },
                meta: TrainMeta {
                    epochs: step,
                    seed,
                    loss_curve: curve,
                },
            };
            return Err(DisentangleError::Model(ModelError::Diverged {
                step,
                last_good: Box::new(ckpt),
            }));
        }

        let targets: Vec<&Var> = graph.trace.params.values().collect();
        let grads = graph.trace.tape.grad(&graph.total, &targets);
        let grad_map = pull_grads(&graph.trace.params, grads);
        last_good = vae.params.clone();
        adam.step(&mut vae.params, &grad_map);

        let z_vals = graph.z.value();
        let codes = Array2::from_shape_fn((opts.batch_size, config.latent_dim), |(r, c)| {
            z_vals[[r, c]]
        });
        let permuted = permute_dims(&codes, derive_seed(seed, &format!("perm-{step}")))?;
        let (disc_tape, disc_params, disc_loss) =
            discriminator_loss_graph(&disc, &codes, &permuted)?;
        let disc_targets: Vec<&Var> = disc_params.values().collect();
        let disc_grads = disc_tape.grad(&disc_loss, &disc_targets);
        let disc_grad_map = pull_grads(&disc_params, disc_grads);
        disc_adam.step(&mut disc.params, &disc_grad_map);

        let is_eval = (step + 1) % opts.eval_every == 0 || step + 1 == opts.steps;
        if is_eval {
            let report = vae_disentanglement_report(
                &vae,
                dataset,
                &opts.metric,
                opts.eval_images,
                derive_seed(seed, &format!("metric-{step}")),
            )?;
            let mut eval_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval-{step}")));
            let eval_imgs: Vec<Array3<f64>> = (0..opts.eval_images.max(1))
                .map(|_| dataset.image(pool[eval_rng.random_range(0..pool.len())]))
                .collect();
            let overlap =
                mean_pairwise_attention_overlap(&vae, &eval_imgs, &ad_cfg.layer_for(config))?;
            log.push(AdTrainRow {
                step: step + 1,
                recon: parts.recon,
                kl: parts.kl,
                tc: parts.tc,
                ad: parts.ad,
                metric: report.score,
                eval_overlap: overlap,
                eval_recon: report.reconstruction_error,
            });
            curve.push(EpochStats {
                epoch: step + 1,
                recon: parts.recon,
                kl: parts.kl,
                total: parts.total,
            });
        }
    }

    Ok(AdTrainOutcome {
        checkpoint: Checkpoint {
            model: vae,
            meta: TrainMeta {
                epochs: opts.steps,
                seed,
                loss_curve: curve,
            },
        },
        discriminator: disc,
        log,
    })
}

/// Writes the evaluation log as CSV.
pub fn write_ad_log_csv(path: &Path, log: &[AdTrainRow]) -> Result<(), DisentangleError> {
    let mut out = String::from("step,recon,kl,tc,ad,metric,eval_overlap,eval_recon\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.step,
            row.recon,
            row.kl,
            row.tc,
            row.ad,
            row.metric,
            row.eval_overlap,
            row.eval_recon
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}
