//! Gradient attention from the latent space.
//!
//! For a scalar target built from the posterior (one latent coordinate, or
//! an anomaly score), gradients are backpropagated to a recorded encoder
//! feature map, averaged spatially into per-channel weights, and recombined
//! with the activations into a nonnegative attention map. Everything stays
//! on the autodiff tape, so the maps themselves remain differentiable and
//! can appear inside training objectives.

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaemap_autodiff::{Arr, Tape, Var};

use crate::data::ImageSource;
use crate::model::{reparameterize_var, EncodeTrace, LatentDistribution, ModelError, Vae};
use crate::util::{derive_seed, resize_bilinear};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("layer {0} was not recorded during the forward pass")]
    UnknownLayer(String),
    #[error("target does not depend on tap {0}")]
    TapNotConnected(String),
    #[error("latent index {got} out of range for {dim} dimensions")]
    LatentIndexOutOfRange { got: usize, dim: usize },
    #[error("normal-difference mode needs statistics fitted on normal data")]
    MissingStats,
    #[error("statistics cover {0} dimensions but the posterior has {1}")]
    StatsDimMismatch(usize, usize),
    #[error("cannot aggregate an empty set of maps")]
    EmptyAggregate,
    #[error("maps disagree in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("sigma must be positive in every dimension")]
    NonPositiveSigma,
    #[error("cannot fit statistics to an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which latent quantity the per-dimension target is read from: the
/// posterior mean, or a sample drawn through the reparameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Mu,
    Z,
}

/// A recorded feature map together with the gradient of one scalar target
/// with respect to it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub layer: String,
    pub activations: Array3<f64>,
    pub grad: Array3<f64>,
}

impl FeatureTap {
    /// Number of spatial positions the channel weights average over.
    pub fn spatial_size(&self) -> usize {
        let (h, w, _) = self.activations.dim();
        h * w
    }
}

/// Which latent coordinate a map explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapIndex {
    Dim(usize),
    Aggregate,
}

/// A nonnegative, finite attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Array2<f64>,
    pub index: MapIndex,
    pub layer: String,
}

impl AttentionMap {
    pub fn new(
        values: Array2<f64>,
        index: MapIndex,
        layer: impl Into<String>,
    ) -> Result<Self, AttentionError> {
        assert!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "attention maps must be finite and nonnegative"
        );
        Ok(AttentionMap {
            values,
            index,
            layer: layer.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Bilinear upsampling; linearity keeps the result nonnegative.
    pub fn upsample(&self, h: usize, w: usize) -> AttentionMap {
        AttentionMap {
            values: resize_bilinear(&self.values, h, w),
            index: self.index,
            layer: self.layer.clone(),
        }
    }
}

/// Gradient of a scalar target with respect to a tap, kept on the tape so
/// downstream uses stay differentiable. Shape (B, h, w, C).
pub fn tap_gradient_var(
    tape: &Tape,
    target: &Var,
    tap: &Var,
    layer: &str,
) -> Result<Var, AttentionError> {
    tape.grad(target, &[tap])
        .pop()
        .flatten()
        .ok_or_else(|| AttentionError::TapNotConnected(layer.to_string()))
}

/// Spatially averaged gradient per channel, shape (B, 1, 1, C).
pub fn channel_weights_var(grad: &Var) -> Var {
    let shape = grad.shape().to_vec();
    let t = (shape[1] * shape[2]) as f64;
    grad.sum_to(&[shape[0], 1, 1, shape[3]]).scale(1.0 / t)
}

/// Plain-array channel weights for a single image's gradient.
pub fn channel_weights(grad: &Array3<f64>) -> Array1<f64> {
    let (h, w, c) = grad.dim();
    let t = (h * w) as f64;
    Array1::from_shape_fn(c, |k| grad.slice(ndarray::s![.., .., k]).sum() / t)
}

/// The attention pipeline on the tape: backpropagate the target to the tap,
/// pool gradients into channel weights, recombine with the activations, and
/// clamp at zero. Shape (B, h, w).
pub fn attention_map_var(
    tape: &Tape,
    target: &Var,
    tap: &Var,
    layer: &str,
) -> Result<Var, AttentionError> {
    let grad = tap_gradient_var(tape, target, tap, layer)?;
    let shape = tap.shape().to_vec();
    let alpha = channel_weights_var(&grad);
    let weighted = tap.mul(&alpha.broadcast_to(&shape));
    let pooled = weighted.sum_to(&[shape[0], shape[1], shape[2], 1]);
    Ok(pooled.reshape(&[shape[0], shape[1], shape[2]]).relu())
}

/// Records the gradient of `target` at a named tap of a single-image trace.
pub fn backprop_to_tap(
    trace: &EncodeTrace,
    target: &Var,
    layer: &str,
) -> Result<FeatureTap, AttentionError> {
    assert_eq!(trace.batch(), 1, "per-image taps need a batch of one");
    let tap = trace
        .tap(layer)
        .ok_or_else(|| AttentionError::UnknownLayer(layer.to_string()))?;
    let grad = tap_gradient_var(&trace.tape, target, tap, layer)?;
    let to3 = |v: Arr| -> Array3<f64> {
        let s = v.shape().to_vec();
        v.into_shape_with_order(IxDyn(&[s[1], s[2], s[3]]))
            .expect("dropping the unit batch axis")
            .into_dimensionality()
            .expect("3-d tap")
    };
    Ok(FeatureTap {
        layer: layer.to_string(),
        activations: to3(tap.value()),
        grad: to3(grad.value()),
    })
}

fn select_scalar(v: &Var, dim: usize) -> Var {
    let d = v.shape()[1];
    let mut onehot = Arr::zeros(IxDyn(&[1, d]));
    onehot[[0, dim]] = 1.0;
    v.mul(&v.tape().leaf(onehot)).sum_all()
}

fn noise_leaf(tape: &Tape, d: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.leaf(Arr::from_shape_simple_fn(IxDyn(&[1, d]), || {
        rng.sample::<f64, _>(StandardNormal)
    }))
}

fn map_values(m: &Var) -> Array2<f64> {
    let v = m.value();
    let s = v.shape().to_vec();
    v.into_shape_with_order(IxDyn(&[s[1], s[2]]))
        .expect("dropping the unit batch axis")
        .into_dimensionality()
        .expect("2-d map")
}

/// Attention for one latent coordinate of one image, at tap resolution.
pub fn attention_for_dim(
    vae: &Vae,
    image: &Array3<f64>,
    dim: usize,
    layer: &str,
    sampling: Sampling,
    seed: u64,
) -> Result<AttentionMap, AttentionError> {
    let d = vae.config.latent_dim;
    if dim >= d {
        return Err(AttentionError::LatentIndexOutOfRange { got: dim, dim: d });
    }
    let trace = vae.trace_image(image)?;
    let tap = trace
        .tap(layer)
        .ok_or_else(|| AttentionError::UnknownLayer(layer.to_string()))?
        .clone();
    let target = match sampling {
        Sampling::Mu => select_scalar(&trace.mu, dim),
        Sampling::Z => {
            let eps = noise_leaf(&trace.tape, d, derive_seed(seed, "latent-noise"));
            select_scalar(&reparameterize_var(&trace.mu, &trace.logvar, &eps), dim)
        }
    };
    let m = attention_map_var(&trace.tape, &target, &tap, layer)?;
    AttentionMap::new(map_values(&m), MapIndex::Dim(dim), layer)
}

/// One map per latent dimension from a single forward pass.
pub fn attention_set(
    vae: &Vae,
    image: &Array3<f64>,
    layer: &str,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<AttentionMap>, AttentionError> {
    let trace = vae.trace_image(image)?;
    let tap = trace
        .tap(layer)
        .ok_or_else(|| AttentionError::UnknownLayer(layer.to_string()))?
        .clone();
    let d = vae.config.latent_dim;
    let code = match sampling {
        Sampling::Mu => trace.mu.clone(),
        Sampling::Z => {
            let eps = noise_leaf(&trace.tape, d, derive_seed(seed, "latent-noise"));
            reparameterize_var(&trace.mu, &trace.logvar, &eps)
        }
    };
    (0..d)
        .map(|i| {
            let m = attention_map_var(&trace.tape, &select_scalar(&code, i), &tap, layer)?;
            AttentionMap::new(map_values(&m), MapIndex::Dim(i), layer)
        })
        .collect()
}

/// Pixelwise mean of a nonempty family of equally sized maps.
pub fn aggregate_mean(maps: &[AttentionMap]) -> Result<AttentionMap, AttentionError> {
    let first = maps.first().ok_or(AttentionError::EmptyAggregate)?;
    let shape = first.resolution();
    let mut acc = Array2::<f64>::zeros(shape);
    for m in maps {
        if m.resolution() != shape {
            return Err(AttentionError::ShapeMismatch(shape, m.resolution()));
        }
        acc += m.values();
    }
    acc /= maps.len() as f64;
    AttentionMap::new(acc, MapIndex::Aggregate, first.layer.clone())
}

/// The scalar anomaly score: the sum of the posterior mean vector.
pub fn anomaly_score(dist: &LatentDistribution) -> f64 {
    dist.mu.sum()
}

/// Per-dimension Gaussian statistics of a reference (normal) population.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalStats {
    mu: Array1<f64>,
    sigma: Array1<f64>,
}

impl NormalStats {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self, AttentionError> {
        assert_eq!(mu.len(), sigma.len(), "statistics vectors must align");
        if sigma.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(AttentionError::NonPositiveSigma);
        }
        Ok(NormalStats { mu, sigma })
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Array1<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Pools per-sample posteriors into population statistics: the mean of the
/// means, and a variance combining average within-sample variance with the
/// spread of the means.
pub fn pool_gaussian_moments(
    dists: &[LatentDistribution],
) -> Result<NormalStats, AttentionError> {
    let first = dists.first().ok_or(AttentionError::EmptyDataset)?;
    let d = first.dim();
    let n = dists.len() as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for dist in dists {
        assert_eq!(dist.dim(), d, "posteriors must share a dimension");
        mean += &dist.mu;
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(d);
    for dist in dists {
        let within = dist.sigma().mapv(|s| s * s);
        let spread = (&dist.mu - &mean).mapv(|x| x * x);
        var += &(within + spread);
    }
    var /= n;
    NormalStats::new(mean, var.mapv(f64::sqrt))
}

/// Encodes every image of a normal dataset and pools the posteriors.
pub fn fit_normal_stats<S: ImageSource + ?Sized>(
    vae: &Vae,
    data: &S,
) -> Result<NormalStats, AttentionError> {
    if data.count() == 0 {
        return Err(AttentionError::EmptyDataset);
    }
    let dists = (0..data.count())
        .map(|i| vae.encode_dist(&data.image(i)))
        .collect::<Result<Vec<_>, _>>()?;
    pool_gaussian_moments(&dists)
}

/// The per-dimension difference distribution between a normal population
/// and one test posterior: Gaussian with the difference of means and the
/// sum of variances.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalDiffDistribution {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

pub fn normal_diff(
    stats: &NormalStats,
    dist_y: &LatentDistribution,
) -> Result<NormalDiffDistribution, AttentionError> {
    if stats.dim() != dist_y.dim() {
        return Err(AttentionError::StatsDimMismatch(stats.dim(), dist_y.dim()));
    }
    let mean = stats.mu() - &dist_y.mu;
    let sigma_y = dist_y.sigma();
    let variance = Array1::from_shape_fn(stats.dim(), |i| {
        stats.sigma()[i].powi(2) + sigma_y[i].powi(2)
    });
    Ok(NormalDiffDistribution { mean, variance })
}

impl NormalDiffDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Gaussian density of dimension `i` at `u`.
    pub fn density(&self, i: usize, u: f64) -> f64 {
        let var = self.variance[i];
        let d = u - self.mean[i];
        (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    /// One draw per dimension.
    pub fn sample(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_fn(self.dim(), |i| {
            self.mean[i] + self.variance[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
    }
}

/// How an anomaly map's backpropagation target is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyMode {
    /// Backpropagate the signed sum of the posterior mean.
    SumMu,
    /// Sample a code from the difference distribution against normal
    /// statistics; backpropagate each coordinate's product with the mean,
    /// then average the per-dimension maps.
    NormalDiff,
}

#[derive(Clone, Debug)]
pub struct AnomalyOptions {
    pub mode: AnomalyMode,
    pub layer: String,
    /// Use |s| instead of the signed score in sum-mu mode.
    pub absolute_score: bool,
}

impl AnomalyOptions {
    pub fn sum_mu(layer: impl Into<String>) -> Self {
        AnomalyOptions {
            mode: AnomalyMode::SumMu,
            layer: layer.into(),
            absolute_score: false,
        }
    }

    pub fn normal_diff(layer: impl Into<String>) -> Self {
        AnomalyOptions {
            mode: AnomalyMode::NormalDiff,
            layer: layer.into(),
            absolute_score: false,
        }
    }
}

/// The middle encoder stage, the default place to read attention from.
pub fn default_layer(config: &crate::model::VaeConfig) -> String {
    let names = config.stage_names();
    names[(names.len() - 1) / 2].clone()
}

/// Anomaly attention for one image, upsampled to input resolution.
pub fn anomaly_attention(
    vae: &Vae,
    image: &Array3<f64>,
    opts: &AnomalyOptions,
    stats: Option<&NormalStats>,
    seed: u64,
) -> Result<AttentionMap, AttentionError> {
    let trace = vae.trace_image(image)?;
    let tap = trace
        .tap(&opts.layer)
        .ok_or_else(|| AttentionError::UnknownLayer(opts.layer.clone()))?
        .clone();
    let small = match opts.mode {
        AnomalyMode::SumMu => {
            let s = trace.mu.sum_all();
            let s = if opts.absolute_score { s.abs() } else { s };
            let m = attention_map_var(&trace.tape, &s, &tap, &opts.layer)?;
            map_values(&m)
        }
        AnomalyMode::NormalDiff => {
            let stats = stats.ok_or(AttentionError::MissingStats)?;
            let diff = normal_diff(stats, &trace.distribution(0))?;
            let zstar = diff.sample(derive_seed(seed, "diff-code"));
            let d = diff.dim();
            let mut acc: Option<Array2<f64>> = None;
            for i in 0..d {
                let target = select_scalar(&trace.mu, i).scale(zstar[i]);
                let m = attention_map_var(&trace.tape, &target, &tap, &opts.layer)?;
                let v = map_values(&m);
                acc = Some(match acc {
                    Some(a) => a + v,
                    None => v,
                });
            }
            acc.expect("at least one latent dimension") / d as f64
        }
    };
    let map = AttentionMap::new(small, MapIndex::Aggregate, opts.layer.clone())?;
    Ok(map.upsample(vae.config.input_h, vae.config.input_w))
}
