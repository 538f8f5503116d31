//! Convolutional encoder/decoder VAEs: configuration, parameter containers,
//! differentiable forward passes, the reparameterization step, and the
//! training objective (reconstruction plus KL).

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, TrainMeta};
pub use train::{train_vae, Adam, EpochStats, TrainOpts};

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaemap_autodiff::{Arr, ConvGeom, Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input resolution {got:?} does not match configured {expected:?}")]
    ResolutionMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("one-class training requires no abnormal samples, found {0}")]
    NotOneClass(String),
    #[error("training diverged at step {step}; last finite state attached")]
    Diverged {
        step: usize,
        last_good: Box<Checkpoint>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

/// One encoder stage: a strided convolution (ReLU) optionally followed by
/// residual blocks at the same resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_pad")]
    pub pad: usize,
    #[serde(default)]
    pub residual_blocks: usize,
}

fn default_kernel() -> usize {
    4
}
fn default_stride() -> usize {
    2
}
fn default_pad() -> usize {
    1
}

impl ConvSpec {
    pub fn new(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: default_kernel(),
            stride: default_stride(),
            pad: default_pad(),
            residual_blocks: 0,
        }
    }
}

/// Model architecture. The decoder mirrors the encoder stage by stage
/// (transposed convolutions back to each intermediate resolution), which
/// guarantees the output resolution equals the input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub latent_dim: usize,
    pub encoder: Vec<ConvSpec>,
    /// Encoder stages whose post-activation maps are recorded for gradient
    /// attention; names are conv1, conv2, ... Defaults to all stages.
    #[serde(default)]
    pub tap_layers: Vec<String>,
}

impl VaeConfig {
    /// Three stride-2 stages; at 100×100 input the tap resolutions are
    /// 50×50, 25×25, and 12×12.
    pub fn small(input_h: usize, input_w: usize, input_c: usize, latent_dim: usize) -> Self {
        let mut cfg = VaeConfig {
            input_h,
            input_w,
            input_c,
            latent_dim,
            encoder: vec![ConvSpec::new(16), ConvSpec::new(32), ConvSpec::new(64)],
            tap_layers: vec![],
        };
        cfg.tap_layers = cfg.stage_names();
        cfg
    }

    /// Like [`small`](Self::small) but with one residual block per stage.
    pub fn residual(input_h: usize, input_w: usize, input_c: usize, latent_dim: usize) -> Self {
        let mut cfg = Self::small(input_h, input_w, input_c, latent_dim);
        for spec in &mut cfg.encoder {
            spec.residual_blocks = 1;
        }
        cfg
    }

    /// The smallest interesting network: one conv with 2 channels on an 8×8
    /// single-channel input, 2 latent dimensions. Used by gradient oracles.
    pub fn tiny() -> Self {
        VaeConfig {
            input_h: 8,
            input_w: 8,
            input_c: 1,
            latent_dim: 2,
            encoder: vec![ConvSpec::new(2)],
            tap_layers: vec!["conv1".into()],
        }
    }

    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.encoder.len()).map(|i| format!("conv{i}")).collect()
    }

    /// (h, w, c) after each encoder stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = Vec::with_capacity(self.encoder.len());
        let (mut h, mut w) = (self.input_h, self.input_w);
        for spec in &self.encoder {
            h = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            w = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            dims.push((h, w, spec.out_channels));
        }
        dims
    }

    /// Flattened feature length entering the latent heads.
    pub fn feature_len(&self) -> usize {
        let (h, w, c) = *self.stage_dims().last().expect("validated nonempty encoder");
        h * w * c
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 {
            return Err(ModelError::InvalidConfig("latent_dim must be at least 1".into()));
        }
        if self.encoder.is_empty() {
            return Err(ModelError::InvalidConfig("encoder needs at least one stage".into()));
        }
        if !matches!(self.input_c, 1 | 3) {
            return Err(ModelError::InvalidConfig(format!(
                "input channels must be 1 or 3, got {}",
                self.input_c
            )));
        }
        let (mut h, mut w) = (self.input_h, self.input_w);
        for (i, spec) in self.encoder.iter().enumerate() {
            if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {} has a zero kernel, stride, or channel count",
                    i + 1
                )));
            }
            if h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {} kernel {} exceeds its padded input {}x{}",
                    i + 1,
                    spec.kernel,
                    h + 2 * spec.pad,
                    w + 2 * spec.pad
                )));
            }
            h = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            w = (w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        }
        if self.tap_layers.is_empty() {
            return Err(ModelError::InvalidConfig("at least one tap layer required".into()));
        }
        let names = self.stage_names();
        for tap in &self.tap_layers {
            if !names.contains(tap) {
                return Err(ModelError::InvalidConfig(format!(
                    "tap layer {tap} not among encoder stages {names:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params(BTreeMap<String, Arr>);

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.0.values().map(|a| a.len()).sum()
    }
}

/// Parameters injected onto a tape as leaves, keyed like [`Params`].
pub type ParamVars = BTreeMap<String, Var>;

pub fn inject_params(tape: &Tape, params: &Params) -> ParamVars {
    params
        .iter()
        .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
        .collect()
}

/// Posterior parameters for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl LatentDistribution {
    pub fn sigma(&self) -> Array1<f64> {
        self.logvar.mapv(|lv| (0.5 * lv).exp())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// A latent sample together with the noise that produced it, so the draw is
/// reproducible from the distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Array1<f64>,
    pub noise: Array1<f64>,
}

/// z = μ + exp(logvar/2) ⊙ ε with ε ~ N(0, I) drawn from `seed`.
pub fn reparameterize(dist: &LatentDistribution, seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array1::from_shape_simple_fn(dist.dim(), || rng.sample::<f64, _>(StandardNormal));
    let z = &dist.mu + &(dist.sigma() * &noise);
    LatentCode { z, noise }
}

/// Graph-level reparameterization; differentiable w.r.t. `mu` and `logvar`.
pub fn reparameterize_var(mu: &Var, logvar: &Var, eps: &Var) -> Var {
    mu.add(&logvar.scale(0.5).exp().mul(eps))
}

/// A frozen model: architecture plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: Params,
}

/// Everything recorded during one encoding forward pass. The tape stays
/// alive inside, so gradients of anything built from `mu`, `logvar`, or the
/// taps can still be taken (and taken again).
pub struct EncodeTrace {
    pub tape: Tape,
    pub x: Var,
    pub params: ParamVars,
    taps: Vec<(String, Var)>,
    pub mu: Var,
    pub logvar: Var,
}

impl EncodeTrace {
    pub fn tap(&self, layer: &str) -> Option<&Var> {
        self.taps
            .iter()
            .find(|(name, _)| name == layer)
            .map(|(_, var)| var)
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    /// Posterior of one batch element.
    pub fn distribution(&self, index: usize) -> LatentDistribution {
        let mu = self.mu.value();
        let logvar = self.logvar.value();
        let d = mu.shape()[1];
        LatentDistribution {
            mu: Array1::from_shape_fn(d, |i| mu[[index, i]]),
            logvar: Array1::from_shape_fn(d, |i| logvar[[index, i]]),
        }
    }
}

impl Vae {
    /// Deterministic parameter initialization from a seed.
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let mut normal = |shape: &[usize], std: f64| -> Arr {
            ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                rng.sample::<f64, _>(StandardNormal) * std
            })
        };

        let mut c_in = config.input_c;
        for (i, spec) in config.encoder.iter().enumerate() {
            let fan_in = spec.kernel * spec.kernel * c_in;
            let name = format!("enc.conv{}", i + 1);
            params.insert(
                format!("{name}.w"),
                normal(&[fan_in, spec.out_channels], (2.0 / fan_in as f64).sqrt()),
            );
            params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[spec.out_channels])));
            for j in 1..=spec.residual_blocks {
                let c = spec.out_channels;
                let std = (2.0 / (9 * c) as f64).sqrt();
                for half in ["half1", "half2"] {
                    params.insert(format!("{name}.res{j}.{half}.w"), normal(&[9 * c, c], std));
                    params.insert(format!("{name}.res{j}.{half}.b"), ArrayD::zeros(IxDyn(&[c])));
                }
            }
            c_in = spec.out_channels;
        }

        let f = config.feature_len();
        let d = config.latent_dim;
        params.insert("enc.fc_mu.w".to_string(), normal(&[f, d], (1.0 / f as f64).sqrt()));
        params.insert("enc.fc_mu.b".to_string(), ArrayD::zeros(IxDyn(&[d])));
        // Small weights keep the initial posterior near the prior.
        params.insert("enc.fc_logvar.w".to_string(), normal(&[f, d], 0.01));
        params.insert("enc.fc_logvar.b".to_string(), ArrayD::zeros(IxDyn(&[d])));
        params.insert("dec.fc.w".to_string(), normal(&[d, f], (2.0 / d as f64).sqrt()));
        params.insert("dec.fc.b".to_string(), ArrayD::zeros(IxDyn(&[f])));

        let mut into_c = config.input_c;
        for (i, spec) in config.encoder.iter().enumerate() {
            let name = format!("dec.ct{}", i + 1);
            let cols = spec.kernel * spec.kernel * into_c;
            params.insert(
                format!("{name}.w"),
                normal(&[spec.out_channels, cols], (2.0 / spec.out_channels as f64).sqrt()),
            );
            params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[into_c])));
            for j in 1..=spec.residual_blocks {
                let c = spec.out_channels;
                let std = (2.0 / (9 * c) as f64).sqrt();
                for half in ["half1", "half2"] {
                    params.insert(format!("{name}.res{j}.{half}.w"), normal(&[9 * c, c], std));
                    params.insert(format!("{name}.res{j}.{half}.b"), ArrayD::zeros(IxDyn(&[c])));
                }
            }
            into_c = spec.out_channels;
        }

        Ok(Vae { config, params })
    }

    /// Runs the encoder over a (B,H,W,C) batch, recording tap activations.
    pub fn trace_batch(&self, batch: ArrayD<f64>) -> Result<EncodeTrace, ModelError> {
        let shape = batch.shape().to_vec();
        let expected = (self.config.input_h, self.config.input_w, self.config.input_c);
        if shape.len() != 4 || (shape[1], shape[2], shape[3]) != expected {
            let got = if shape.len() == 4 {
                (shape[1], shape[2], shape[3])
            } else {
                (0, 0, 0)
            };
            return Err(ModelError::ResolutionMismatch { expected, got });
        }
        let tape = Tape::new();
        let params = inject_params(&tape, &self.params);
        let x = tape.leaf(batch);
        Ok(encode_on_tape(&tape, &params, &self.config, &x))
    }

    pub fn trace_image(&self, image: &Array3<f64>) -> Result<EncodeTrace, ModelError> {
        let (h, w, c) = image.dim();
        let batch = image
            .clone()
            .into_shape_with_order(IxDyn(&[1, h, w, c]))
            .expect("adding a batch axis cannot fail");
        self.trace_batch(batch)
    }

    /// Posterior parameters for a single image.
    pub fn encode_dist(&self, image: &Array3<f64>) -> Result<LatentDistribution, ModelError> {
        Ok(self.trace_image(image)?.distribution(0))
    }

    /// Decodes one latent vector to an image.
    pub fn decode(&self, z: &Array1<f64>) -> Result<Array3<f64>, ModelError> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        let tape = Tape::new();
        let params = inject_params(&tape, &self.params);
        let zv = tape.leaf(
            z.clone()
                .into_shape_with_order(IxDyn(&[1, z.len()]))
                .expect("adding a batch axis cannot fail"),
        );
        let out = decode_on_tape(&params, &self.config, &zv).value();
        let (h, w, c) = (self.config.input_h, self.config.input_w, self.config.input_c);
        Ok(out
            .into_shape_with_order(IxDyn(&[h, w, c]))
            .expect("decoder emits the configured resolution")
            .into_dimensionality()
            .expect("3-d shape"))
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, image: &Array3<f64>) -> Result<Array3<f64>, ModelError> {
        let dist = self.encode_dist(image)?;
        self.decode(&dist.mu)
    }
}

pub(crate) fn fc(x: &Var, params: &ParamVars, prefix: &str) -> Var {
    let w = &params[&format!("{prefix}.w")];
    let b = &params[&format!("{prefix}.b")];
    let rows = x.shape()[0];
    let cols = w.shape()[1];
    x.matmul(w)
        .add(&b.reshape(&[1, cols]).broadcast_to(&[rows, cols]))
}

fn conv2d(x: &Var, params: &ParamVars, prefix: &str, geom: ConvGeom, out_channels: usize) -> Var {
    let w = &params[&format!("{prefix}.w")];
    let b = &params[&format!("{prefix}.b")];
    let rows = geom.batch * geom.out_h() * geom.out_w();
    let y = x
        .im2col(geom)
        .matmul(w)
        .add(&b.reshape(&[1, out_channels]).broadcast_to(&[rows, out_channels]));
    y.reshape(&[geom.batch, geom.out_h(), geom.out_w(), out_channels])
}

/// Transposed convolution via the column-scatter adjoint; `geom` describes
/// the *output* image, and its conv arithmetic must map back to the input's
/// spatial size.
fn conv2d_transpose(x: &Var, params: &ParamVars, prefix: &str, geom: ConvGeom) -> Var {
    let w = &params[&format!("{prefix}.w")];
    let b = &params[&format!("{prefix}.b")];
    let shape = x.shape();
    let (batch, h, wd, c_in) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(geom.out_h(), h, "transpose geometry mismatch");
    assert_eq!(geom.out_w(), wd, "transpose geometry mismatch");
    let img = x.reshape(&[batch * h * wd, c_in]).matmul(w).col2im(geom);
    let c_out = geom.channels;
    img.add(
        &b.reshape(&[1, 1, 1, c_out])
            .broadcast_to(&[geom.batch, geom.height, geom.width, c_out]),
    )
}

/// Encoder forward pass on an existing tape.
pub fn encode_on_tape(tape: &Tape, params: &ParamVars, config: &VaeConfig, x: &Var) -> EncodeTrace {
    let batch = x.shape()[0];
    let (mut h, mut w, mut c) = (config.input_h, config.input_w, config.input_c);
    let mut cur = x.clone();
    let mut taps = Vec::with_capacity(config.encoder.len());
    for (i, spec) in config.encoder.iter().enumerate() {
        let geom = ConvGeom {
            batch,
            height: h,
            width: w,
            channels: c,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
        };
        let name = format!("conv{}", i + 1);
        cur = conv2d(&cur, params, &format!("enc.{name}"), geom, spec.out_channels).relu();
        h = geom.out_h();
        w = geom.out_w();
        c = spec.out_channels;
        let res_geom = ConvGeom {
            batch,
            height: h,
            width: w,
            channels: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        for j in 1..=spec.residual_blocks {
            cur = res_block(&cur, params, &format!("enc.{name}.res{j}"), res_geom);
        }
        taps.push((name, cur.clone()));
    }
    let flat = cur.reshape(&[batch, h * w * c]);
    let mu = fc(&flat, params, "enc.fc_mu");
    let logvar = fc(&flat, params, "enc.fc_logvar");
    EncodeTrace {
        tape: tape.clone(),
        x: x.clone(),
        params: params.clone(),
        taps,
        mu,
        logvar,
    }
}

fn res_block(x: &Var, params: &ParamVars, prefix: &str, geom: ConvGeom) -> Var {
    let c = geom.channels;
    let t = conv2d(x, params, &format!("{prefix}.half1"), geom, c).relu();
    let t = conv2d(&t, params, &format!("{prefix}.half2"), geom, c);
    x.add(&t).relu()
}

/// Decoder forward pass; z is (B,D), output (B,H,W,C) squashed to (0,1) by
/// a final sigmoid. The graph lands on the tape z already lives on.
pub fn decode_on_tape(params: &ParamVars, config: &VaeConfig, z: &Var) -> Var {
    let batch = z.shape()[0];
    let dims = config.stage_dims();
    let (fh, fw, fc_) = *dims.last().expect("validated nonempty encoder");
    let mut cur = fc(z, params, "dec.fc")
        .relu()
        .reshape(&[batch, fh, fw, fc_]);

    for i in (0..config.encoder.len()).rev() {
        let spec = &config.encoder[i];
        let (h, w, c) = dims[i];
        let res_geom = ConvGeom {
            batch,
            height: h,
            width: w,
            channels: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        for j in (1..=spec.residual_blocks).rev() {
            cur = res_block(&cur, params, &format!("dec.ct{}.res{j}", i + 1), res_geom);
        }
        let (th, tw, tc) = if i == 0 {
            (config.input_h, config.input_w, config.input_c)
        } else {
            dims[i - 1]
        };
        let geom = ConvGeom {
            batch,
            height: th,
            width: tw,
            channels: tc,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
        };
        cur = conv2d_transpose(&cur, params, &format!("dec.ct{}", i + 1), geom);
        cur = if i == 0 { cur.sigmoid() } else { cur.relu() };
    }
    cur
}

/// Reconstruction, KL, and combined objective values for a batch.
/// Reconstruction is the mean squared error over all pixels and batch
/// elements; KL is the closed form for a diagonal Gaussian against the
/// standard normal, averaged over the batch.
pub fn vae_loss_vars(x: &Var, xhat: &Var, mu: &Var, logvar: &Var, beta: f64) -> (Var, Var, Var) {
    let batch = mu.shape()[0] as f64;
    let lr = xhat.sub(x).square().mean_all();
    let lkl = mu
        .square()
        .add(&logvar.exp())
        .add_scalar(-1.0)
        .sub(logvar)
        .sum_all()
        .scale(0.5 / batch);
    let total = lr.add(&lkl.scale(beta));
    (lr, lkl, total)
}

/// Plain-number loss for a single sample; the graph version above is the
/// training path.
pub fn vae_loss(
    x: &Array3<f64>,
    xhat: &Array3<f64>,
    dist: &LatentDistribution,
    beta: f64,
) -> (f64, f64, f64) {
    assert_eq!(x.dim(), xhat.dim(), "reconstruction shape mismatch");
    let lr = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    let lkl = 0.5
        * dist
            .mu
            .iter()
            .zip(dist.logvar.iter())
            .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>();
    (lr, lkl, lr + beta * lkl)
}

/// Stacks equally sized H×W×C images into a (B,H,W,C) batch.
pub fn stack_images(images: &[Array3<f64>]) -> ArrayD<f64> {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let (h, w, c) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), h, w, c]));
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, c), "batch images must share a shape");
        let mut slot = out.index_axis_mut(ndarray::Axis(0), b);
        slot.assign(&img.view().into_dyn());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use vaemap_autodiff::check::central_diff;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((h, w, c), || rng.random::<f64>())
    }

    #[test]
    fn three_stride_two_stages_give_the_expected_tap_resolutions() {
        let cfg = VaeConfig::small(100, 100, 3, 32);
        assert_eq!(
            cfg.stage_dims(),
            vec![(50, 50, 16), (25, 25, 32), (12, 12, 64)]
        );
        assert_eq!(cfg.feature_len(), 12 * 12 * 64);
        assert_eq!(cfg.stage_names(), vec!["conv1", "conv2", "conv3"]);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let mut cfg = VaeConfig::tiny();
        cfg.latent_dim = 0;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));

        let mut cfg = VaeConfig::tiny();
        cfg.encoder.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::tiny();
        cfg.tap_layers = vec!["conv9".into()];
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::tiny();
        cfg.input_c = 2;
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::tiny();
        cfg.encoder[0].kernel = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zeroed_weights_give_a_standard_normal_posterior() {
        let mut vae = Vae::init(VaeConfig::tiny(), 3).unwrap();
        let names: Vec<String> = vae.params.names().cloned().collect();
        for name in names {
            vae.params.get_mut(&name).fill(0.0);
        }
        let dist = vae.encode_dist(&random_image(8, 8, 1, 11)).unwrap();
        assert!(dist.mu.iter().all(|&m| m == 0.0));
        assert!(dist.logvar.iter().all(|&lv| lv == 0.0));
        assert!(dist.sigma().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn encode_decode_shapes_round_trip_across_architectures() {
        let configs = [
            VaeConfig::tiny(),
            VaeConfig::small(32, 32, 1, 4),
            VaeConfig::residual(20, 20, 3, 6),
        ];
        for cfg in configs {
            let (h, w, c) = (cfg.input_h, cfg.input_w, cfg.input_c);
            let vae = Vae::init(cfg, 5).unwrap();
            let img = random_image(h, w, c, 17);
            let recon = vae.reconstruct(&img).unwrap();
            assert_eq!(recon.dim(), (h, w, c));
            assert!(recon
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn trace_records_taps_at_stage_resolutions() {
        let cfg = VaeConfig::small(32, 32, 1, 4);
        let vae = Vae::init(cfg, 5).unwrap();
        let trace = vae.trace_image(&random_image(32, 32, 1, 2)).unwrap();
        assert_eq!(trace.tap_names(), vec!["conv1", "conv2", "conv3"]);
        assert_eq!(trace.tap("conv1").unwrap().shape(), &[1, 16, 16, 16]);
        assert_eq!(trace.tap("conv2").unwrap().shape(), &[1, 8, 8, 32]);
        assert_eq!(trace.tap("conv3").unwrap().shape(), &[1, 4, 4, 64]);
        assert!(trace.tap("conv4").is_none());
        assert_eq!(trace.mu.shape(), &[1, 4]);
        assert_eq!(trace.logvar.shape(), &[1, 4]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let vae = Vae::init(VaeConfig::tiny(), 9).unwrap();
        let img = random_image(8, 8, 1, 21);
        let a = vae.encode_dist(&img).unwrap();
        let b = vae.encode_dist(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let vae = Vae::init(VaeConfig::tiny(), 1).unwrap();
        let err = vae.encode_dist(&random_image(9, 8, 1, 0)).unwrap_err();
        assert!(matches!(err, ModelError::ResolutionMismatch { .. }));
        let err = vae.decode(&Array1::zeros(5)).unwrap_err();
        assert!(matches!(
            err,
            ModelError::DimensionMismatch { expected: 2, got: 5 }
        ));
    }

    #[test]
    fn reparameterization_reduces_to_the_mean_when_variance_vanishes() {
        let dist = LatentDistribution {
            mu: ndarray::array![0.4, -1.2, 3.0],
            logvar: ndarray::array![-80.0, -80.0, -80.0],
        };
        let code = reparameterize(&dist, 123);
        for (z, m) in code.z.iter().zip(dist.mu.iter()) {
            assert!((z - m).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterization_matches_the_recorded_noise_and_seed() {
        let dist = LatentDistribution {
            mu: ndarray::array![0.5, -0.5],
            logvar: ndarray::array![0.3, -0.7],
        };
        let a = reparameterize(&dist, 7);
        let b = reparameterize(&dist, 7);
        assert_eq!(a, b);
        let again = &dist.mu + &(dist.sigma() * &a.noise);
        for (x, y) in a.z.iter().zip(again.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = reparameterize(&dist, 8);
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn sample_moments_match_the_distribution() {
        let dist = LatentDistribution {
            mu: ndarray::array![0.8],
            logvar: ndarray::array![0.6],
        };
        let n = 40_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let z = reparameterize(&dist, 1000 + i).z[0];
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let sigma = dist.sigma()[0];
        let se_mean = sigma / (n as f64).sqrt();
        assert!((mean - 0.8).abs() < 4.0 * se_mean, "mean {mean}");
        let se_var = sigma * sigma * (2.0 / n as f64).sqrt();
        assert!((var - sigma * sigma).abs() < 4.0 * se_var, "var {var}");
    }

    #[test]
    fn pathwise_gradients_of_the_sampler_match_finite_differences() {
        let tape = Tape::new();
        let mu0 = ndarray::array![0.3, -0.9].into_dyn();
        let lv0 = ndarray::array![0.4, -0.2].into_dyn();
        let eps0 = ndarray::array![1.3, -0.5].into_dyn();
        let mu = tape.leaf(mu0.clone());
        let lv = tape.leaf(lv0.clone());
        let eps = tape.leaf(eps0.clone());
        let weights = tape.leaf(ndarray::array![2.0, -1.5].into_dyn());
        let y = reparameterize_var(&mu, &lv, &eps).mul(&weights).sum_all();
        let grads = tape.grad(&y, &[&mu, &lv]);

        let f_mu = |m: &Arr| -> f64 {
            let t = Tape::new();
            let y = reparameterize_var(&t.leaf(m.clone()), &t.leaf(lv0.clone()), &t.leaf(eps0.clone()))
                .mul(&t.leaf(ndarray::array![2.0, -1.5].into_dyn()))
                .sum_all();
            y.scalar()
        };
        let f_lv = |l: &Arr| -> f64 {
            let t = Tape::new();
            let y = reparameterize_var(&t.leaf(mu0.clone()), &t.leaf(l.clone()), &t.leaf(eps0.clone()))
                .mul(&t.leaf(ndarray::array![2.0, -1.5].into_dyn()))
                .sum_all();
            y.scalar()
        };
        let fd_mu = central_diff(f_mu, &mu0, 1e-6);
        let fd_lv = central_diff(f_lv, &lv0, 1e-6);
        for (a, b) in grads[0].as_ref().unwrap().value().iter().zip(fd_mu.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in grads[1].as_ref().unwrap().value().iter().zip(fd_lv.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn loss_terms_vanish_exactly_where_they_should() {
        let img = random_image(8, 8, 1, 5);
        let prior = LatentDistribution {
            mu: Array1::zeros(3),
            logvar: Array1::zeros(3),
        };
        let (lr, lkl, total) = vae_loss(&img, &img, &prior, 1.0);
        assert_eq!(lr, 0.0);
        assert_eq!(lkl, 0.0);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn unit_mean_shift_costs_exactly_half_a_nat() {
        let img = random_image(4, 4, 1, 5);
        let dist = LatentDistribution {
            mu: ndarray::array![1.0],
            logvar: ndarray::array![0.0],
        };
        let (_, lkl, _) = vae_loss(&img, &img, &dist, 1.0);
        assert!((lkl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_form_kl_matches_a_monte_carlo_estimate() {
        let dist = LatentDistribution {
            mu: ndarray::array![0.3, -0.7],
            logvar: ndarray::array![0.1, -0.4],
        };
        let (_, closed, _) = vae_loss(
            &Array3::zeros((2, 2, 1)),
            &Array3::zeros((2, 2, 1)),
            &dist,
            1.0,
        );

        let sigma = dist.sigma();
        let n = 200_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut ratio = 0.0;
            for d in 0..2 {
                let e: f64 = rng.sample(StandardNormal);
                let z = dist.mu[d] + sigma[d] * e;
                let log_q = -0.5 * (e * e) - sigma[d].ln();
                let log_p = -0.5 * (z * z);
                ratio += log_q - log_p;
            }
            sum += ratio;
            sumsq += ratio * ratio;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (closed - mc).abs() < (0.01 * closed).max(4.0 * se),
            "closed {closed} vs monte carlo {mc} (se {se})"
        );
    }

    #[test]
    fn graph_and_plain_losses_agree() {
        let cfg = VaeConfig::tiny();
        let vae = Vae::init(cfg.clone(), 31).unwrap();
        let img = random_image(8, 8, 1, 3);
        let dist = vae.encode_dist(&img).unwrap();
        let xhat = vae.decode(&dist.mu).unwrap();
        let (lr_plain, lkl_plain, _) = vae_loss(&img, &xhat, &dist, 1.0);

        let tape = Tape::new();
        let pv = inject_params(&tape, &vae.params);
        let x = tape.leaf(stack_images(std::slice::from_ref(&img)));
        let trace = encode_on_tape(&tape, &pv, &cfg, &x);
        let xhat_v = decode_on_tape(&pv, &cfg, &trace.mu);
        let (lr_v, lkl_v, _) = vae_loss_vars(&x, &xhat_v, &trace.mu, &trace.logvar, 1.0);
        assert!((lr_v.scalar() - lr_plain).abs() < 1e-12);
        assert!((lkl_v.scalar() - lkl_plain).abs() < 1e-12);
    }

    #[test]
    fn decoder_output_stays_in_the_unit_interval_for_extreme_codes() {
        let vae = Vae::init(VaeConfig::tiny(), 19).unwrap();
        for a in [-6.0, -2.0, 0.0, 2.0, 6.0] {
            for b in [-6.0, 0.0, 6.0] {
                let out = vae.decode(&ndarray::array![a, b]).unwrap();
                assert!(out
                    .iter()
                    .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn parameter_gradients_of_the_objective_match_finite_differences() {
        let cfg = VaeConfig::tiny();
        let vae = Vae::init(cfg.clone(), 7).unwrap();
        let img = random_image(8, 8, 1, 13);
        let x_arr = stack_images(std::slice::from_ref(&img));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps_arr = Arr::from_shape_simple_fn(IxDyn(&[1, cfg.latent_dim]), || {
            rng.sample::<f64, _>(StandardNormal)
        });

        let loss_at = |params: &Params| -> f64 {
            let tape = Tape::new();
            let pv = inject_params(&tape, params);
            let x = tape.leaf(x_arr.clone());
            let trace = encode_on_tape(&tape, &pv, &cfg, &x);
            let eps = tape.leaf(eps_arr.clone());
            let z = reparameterize_var(&trace.mu, &trace.logvar, &eps);
            let xhat = decode_on_tape(&pv, &cfg, &z);
            vae_loss_vars(&x, &xhat, &trace.mu, &trace.logvar, 1.0).2.scalar()
        };

        let tape = Tape::new();
        let pv = inject_params(&tape, &vae.params);
        let x = tape.leaf(x_arr.clone());
        let trace = encode_on_tape(&tape, &pv, &cfg, &x);
        let eps = tape.leaf(eps_arr.clone());
        let z = reparameterize_var(&trace.mu, &trace.logvar, &eps);
        let xhat = decode_on_tape(&pv, &cfg, &z);
        let (_, _, total) = vae_loss_vars(&x, &xhat, &trace.mu, &trace.logvar, 1.0);
        let names: Vec<&String> = pv.keys().collect();
        let targets: Vec<&Var> = pv.values().collect();
        let grads = tape.grad(&total, &targets);

        for (name, grad) in names.iter().zip(&grads) {
            let analytic = grad
                .as_ref()
                .map(|g| g.value())
                .unwrap_or_else(|| Arr::zeros(vae.params.get(name).raw_dim()));
            let base = vae.params.get(name).clone();
            let mut fd = Arr::zeros(base.raw_dim());
            let eps_fd = 1e-5;
            for idx in 0..base.len() {
                let mut plus = vae.params.clone();
                plus.get_mut(name).as_slice_mut().unwrap()[idx] += eps_fd;
                let mut minus = vae.params.clone();
                minus.get_mut(name).as_slice_mut().unwrap()[idx] -= eps_fd;
                fd.as_slice_mut().unwrap()[idx] =
                    (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps_fd);
            }
            for (a, f) in analytic.iter().zip(fd.iter()) {
                let scale = f.abs().max(1e-3);
                assert!(
                    (a - f).abs() / scale < 1e-4,
                    "{name}: analytic {a} vs finite-difference {f}"
                );
            }
        }
    }
}
