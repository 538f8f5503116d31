//! Minibatch VAE training with Adam, deterministic from a single seed.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vaemap_autodiff::{Arr, Tape};

use crate::data::{AugmentConfig, DatasetManifest};
use crate::model::{
    decode_on_tape, encode_on_tape, inject_params, reparameterize_var, stack_images,
    vae_loss_vars, Checkpoint, ModelError, Params, TrainMeta, Vae, VaeConfig,
};
use crate::util::derive_seed;

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the KL term.
    pub beta: f64,
    pub augment: Option<AugmentConfig>,
    /// Optional hard cap on optimizer steps, applied across epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            beta: 1.0,
            augment: None,
            max_steps: None,
        }
    }
}

/// Mean per-step losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Adam with bias correction; state is kept per parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            azip_update(m, v, p, g, self.beta1, self.beta2, self.lr, self.eps, c1, c2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    m: &mut Arr,
    v: &mut Arr,
    p: &mut Arr,
    g: &Arr,
    beta1: f64,
    beta2: f64,
    lr: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    ndarray::Zip::from(m)
        .and(v)
        .and(p)
        .and(g)
        .for_each(|m, v, p, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
}

/// Trains on a manifest after checking it is a one-class training set.
pub fn train_vae(
    manifest: &DatasetManifest,
    config: &VaeConfig,
    opts: &TrainOpts,
    seed: u64,
) -> Result<Checkpoint, ModelError> {
    if let Some(bad) = manifest.samples().iter().find(|s| s.label.is_abnormal()) {
        return Err(ModelError::NotOneClass(bad.source_id.clone()));
    }
    let images: Vec<Array3<f64>> = manifest
        .samples()
        .iter()
        .map(|s| s.pixels().clone())
        .collect();
    train_on_images(&images, config, opts, seed)
}

/// Core training loop over a slice of images.
///
/// One seed fixes initialization, shuffling, augmentation, and the
/// reparameterization noise, so repeated runs produce identical loss curves
/// and identical parameters. If the objective stops being finite the run
/// aborts with the last finite parameter state attached to the error.
pub fn train_on_images(
    images: &[Array3<f64>],
    config: &VaeConfig,
    opts: &TrainOpts,
    seed: u64,
) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    if images.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let expected = (config.input_h, config.input_w, config.input_c);
    for img in images {
        if img.dim() != expected {
            return Err(ModelError::ResolutionMismatch {
                expected,
                got: img.dim(),
            });
        }
    }
    if opts.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
    }

    let mut vae = Vae::init(config.clone(), derive_seed(seed, "init"))?;
    let mut adam = Adam::new(opts.lr);
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut last_good = vae.params.clone();
    let mut step = 0usize;

    'epochs: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let (mut sum_r, mut sum_k, mut sum_t) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|cap| step >= cap) {
                break 'epochs;
            }
            let batch: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| match &opts.augment {
                    Some(cfg) => crate::data::augment_pixels(
                        &images[i],
                        cfg,
                        derive_seed(seed, &format!("aug-{epoch}-{step}-{i}")),
                    ),
                    None => images[i].clone(),
                })
                .collect();

            let tape = Tape::new();
            let pvars = inject_params(&tape, &vae.params);
            let x = tape.leaf(stack_images(&batch));
            let trace = encode_on_tape(&tape, &pvars, config, &x);

            let mut noise_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("noise-{epoch}-{step}")));
            let eps = tape.leaf(Arr::from_shape_simple_fn(
                ndarray::IxDyn(&[chunk.len(), config.latent_dim]),
                || noise_rng.sample::<f64, _>(StandardNormal),
            ));
            let z = reparameterize_var(&trace.mu, &trace.logvar, &eps);
            let xhat = decode_on_tape(&pvars, config, &z);
            let (lr_v, lkl_v, total) = vae_loss_vars(&x, &xhat, &trace.mu, &trace.logvar, opts.beta);

            let total_val = total.scalar();
            if !total_val.is_finite() {
                let ckpt = Checkpoint {
                    model: Vae {
                        config: config.clone(),
                        params: last_good,
                    },
                    meta: TrainMeta {
                        epochs: epoch,
                        seed,
                        loss_curve: curve,
                    },
                };
                return Err(ModelError::Diverged {
                    step,
                    last_good: Box::new(ckpt),
                });
            }
            sum_r += lr_v.scalar();
            sum_k += lkl_v.scalar();
            sum_t += total_val;
            batches += 1;

            let names: Vec<&String> = pvars.keys().collect();
            let targets: Vec<&vaemap_autodiff::Var> = pvars.values().collect();
            let grads = tape.grad(&total, &targets);
            let grad_map: BTreeMap<String, Arr> = names
                .iter()
                .zip(grads)
                .map(|(name, g)| {
                    let value = match g {
                        Some(var) => var.value(),
                        None => Arr::zeros(vae.params.get(name).raw_dim()),
                    };
                    ((*name).clone(), value)
                })
                .collect();

            last_good = vae.params.clone();
            adam.step(&mut vae.params, &grad_map);
            step += 1;
        }
        if batches > 0 {
            let n = batches as f64;
            curve.push(EpochStats {
                epoch,
                recon: sum_r / n,
                kl: sum_k / n,
                total: sum_t / n,
            });
        }
    }

    Ok(Checkpoint {
        model: vae,
        meta: TrainMeta {
            epochs: opts.epochs,
            seed,
            loss_curve: curve,
        },
    })
}
