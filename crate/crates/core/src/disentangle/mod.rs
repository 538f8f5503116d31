//! Training with an attention-separation penalty. A total-correlation
//! discriminator turns the plain VAE objective into a FactorVAE-style one;
//! on top of that, a differentiable overlap loss pushes the attention maps
//! of different latent dimensions onto disjoint pixel regions. Because the
//! maps are themselves built from gradients, the combined loss needs
//! second-order differentiation, which the shared tape supports natively.

mod metric;
mod train;

pub use metric::{
    disentanglement_metric, mean_pairwise_attention_overlap, vae_disentanglement_report,
    CodeSource, DisentanglementReport, MetricOpts, MetricOutcome, VaeCodes,
};
pub use train::{train_ad_factorvae, write_ad_log_csv, AdTrainOpts, AdTrainOutcome, AdTrainRow};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaemap_autodiff::{Arr, Tape, Var};

use crate::attention::{attention_map_var, AttentionError};
use crate::data::DataError;
use crate::model::{
    decode_on_tape, encode_on_tape, fc, inject_params, reparameterize_var, stack_images,
    vae_loss_vars, EncodeTrace, ModelError, ParamVars, Params, Vae, VaeConfig,
};

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error("lambda must be a nonnegative number, got {0}")]
    BadLambda(f64),
    #[error("fixed pair ({0}, {1}) must name two distinct dims below {2}")]
    BadFixedPair(usize, usize, usize),
    #[error("pair selection needs at least two latent dims, got {0}")]
    TooFewDims(usize),
    #[error("attention maps must be nonnegative")]
    NegativeMapEntry,
    #[error("map shapes differ: {0:?} vs {1:?}")]
    MapShapeMismatch((usize, usize), (usize, usize)),
    #[error("dimension permutation needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("code length {got} does not match the discriminator input {expected}")]
    CodeDimMismatch { expected: usize, got: usize },
    #[error("every latent dim has zero variance over the dataset")]
    AllDimsCollapsed,
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the two maps entering the overlap loss are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSelection {
    /// The two dims with the largest code magnitude, per batch element.
    Top2Response,
    /// Average the loss over every unordered dim pair.
    AllPairs,
    /// One fixed pair for the whole run.
    Fixed(usize, usize),
}

/// Optional per-map rescaling before the overlap ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapNormalization {
    #[default]
    None,
    SumToOne,
}

/// Settings for the attention-separation term.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdConfig {
    /// Weight of the overlap loss in the combined objective.
    pub lambda: f64,
    pub pair_selection: PairSelection,
    /// Tap to differentiate through; defaults to the last encoder stage,
    /// whose small maps keep the double backward cheap.
    pub attention_layer: Option<String>,
    pub normalization: MapNormalization,
}

impl Default for AdConfig {
    fn default() -> Self {
        AdConfig {
            lambda: 1.0,
            pair_selection: PairSelection::Top2Response,
            attention_layer: None,
            normalization: MapNormalization::None,
        }
    }
}

impl AdConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<(), DisentangleError> {
        if !(self.lambda >= 0.0) {
            return Err(DisentangleError::BadLambda(self.lambda));
        }
        if let PairSelection::Fixed(i, j) = self.pair_selection {
            if i == j || i >= latent_dim || j >= latent_dim {
                return Err(DisentangleError::BadFixedPair(i, j, latent_dim));
            }
        }
        Ok(())
    }

    /// Resolves the tap name against a concrete architecture.
    pub fn layer_for(&self, config: &VaeConfig) -> String {
        self.attention_layer.clone().unwrap_or_else(|| {
            config
                .stage_names()
                .last()
                .expect("validated configs have at least one stage")
                .clone()
        })
    }
}

/// Overlap of two nonnegative maps: twice the mass under their pixelwise
/// minimum over their combined mass. 1 for identical nonzero maps, 0 for
/// disjoint supports, and defined as 0 when both maps are identically zero.
pub fn attention_disentanglement_loss(
    a1: &Array2<f64>,
    a2: &Array2<f64>,
) -> Result<f64, DisentangleError> {
    if a1.dim() != a2.dim() {
        return Err(DisentangleError::MapShapeMismatch(a1.dim(), a2.dim()));
    }
    if a1.iter().chain(a2.iter()).any(|&v| v < 0.0) {
        return Err(DisentangleError::NegativeMapEntry);
    }
    let (mut num, mut mass1, mut mass2) = (0.0, 0.0, 0.0);
    for (&x, &y) in a1.iter().zip(a2.iter()) {
        num += x.min(y);
        mass1 += x;
        mass2 += y;
    }
    let den = mass1 + mass2;
    if den == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * num / den)
    }
}

/// On-tape overlap of two batched maps of shape (B, h, w), averaged over
/// the batch. Elements whose maps are both zero contribute 0 and a zero
/// gradient, matching the plain version's convention.
pub fn attention_disentanglement_loss_var(a1: &Var, a2: &Var) -> Var {
    let shape = a1.shape().to_vec();
    assert_eq!(shape, a2.shape(), "overlap needs equally shaped maps");
    let b = shape[0];
    let num = a1.min_elem(a2).sum_to(&[b, 1, 1]).scale(2.0);
    let den = a1.add(a2).sum_to(&[b, 1, 1]);
    let guard = den.value().mapv(|v| if v == 0.0 { 1.0 } else { 0.0 });
    num.div(&den.add(&a1.tape().leaf(guard))).mean_all()
}

fn normalize_maps_var(maps: &Var) -> Var {
    let shape = maps.shape().to_vec();
    let sums = maps.sum_to(&[shape[0], 1, 1]);
    let guard = sums.value().mapv(|v| if v == 0.0 { 1.0 } else { 0.0 });
    maps.div(&sums.add(&maps.tape().leaf(guard)).broadcast_to(&shape))
}

fn overlap_term(a1: &Var, a2: &Var, norm: MapNormalization) -> Var {
    match norm {
        MapNormalization::None => attention_disentanglement_loss_var(a1, a2),
        MapNormalization::SumToOne => attention_disentanglement_loss_var(
            &normalize_maps_var(a1),
            &normalize_maps_var(a2),
        ),
    }
}

/// The two dims of one code with the largest magnitude, strongest first;
/// ties prefer the lower index.
pub fn top2_by_response(code: &[f64]) -> Result<(usize, usize), DisentangleError> {
    if code.len() < 2 {
        return Err(DisentangleError::TooFewDims(code.len()));
    }
    let mut order: Vec<usize> = (0..code.len()).collect();
    order.sort_by(|&a, &b| {
        code[b]
            .abs()
            .partial_cmp(&code[a].abs())
            .expect("finite codes")
            .then(a.cmp(&b))
    });
    Ok((order[0], order[1]))
}

/// The dim pairs the overlap loss runs on for one code.
pub fn select_attention_pairs(
    code: &Array1<f64>,
    cfg: &AdConfig,
) -> Result<Vec<(usize, usize)>, DisentangleError> {
    let d = code.len();
    if d < 2 {
        return Err(DisentangleError::TooFewDims(d));
    }
    cfg.validate(d)?;
    match cfg.pair_selection {
        PairSelection::Top2Response => Ok(vec![top2_by_response(
            code.as_slice().expect("contiguous 1-d code"),
        )?]),
        PairSelection::AllPairs => Ok((0..d)
            .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
            .collect()),
        PairSelection::Fixed(i, j) => Ok(vec![(i, j)]),
    }
}

/// Small classifier scoring whether a batch of codes came from the joint
/// posterior (first logit) or from its dimension-permuted product
/// (second logit).
#[derive(Clone, Debug)]
pub struct TcDiscriminator {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub params: Params,
}

impl TcDiscriminator {
    /// Deterministic initialization; weights use He scaling, biases zero.
    pub fn init(latent_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let mut fan_in = latent_dim;
        for (i, &width) in hidden.iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            params.insert(
                format!("disc.fc{}.w", i + 1),
                ArrayD::from_shape_simple_fn(IxDyn(&[fan_in, width]), || {
                    rng.sample::<f64, _>(StandardNormal) * std
                }),
            );
            params.insert(format!("disc.fc{}.b", i + 1), ArrayD::zeros(IxDyn(&[width])));
            fan_in = width;
        }
        let std = (1.0 / fan_in as f64).sqrt();
        params.insert(
            "disc.out.w",
            ArrayD::from_shape_simple_fn(IxDyn(&[fan_in, 2]), || {
                rng.sample::<f64, _>(StandardNormal) * std
            }),
        );
        params.insert("disc.out.b", ArrayD::zeros(IxDyn(&[2])));
        TcDiscriminator {
            latent_dim,
            hidden: hidden.to_vec(),
            params,
        }
    }

    /// Forward pass over already injected parameters; codes (B, D) in,
    /// logits (B, 2) out.
    pub fn logits_on_tape(&self, params: &ParamVars, codes: &Var) -> Var {
        let mut cur = codes.clone();
        for i in 1..=self.hidden.len() {
            cur = leaky_relu(&fc(&cur, params, &format!("disc.fc{i}")), 0.2);
        }
        fc(&cur, params, "disc.out")
    }

    /// Plain evaluation on a throwaway tape.
    pub fn logits(&self, codes: &Array2<f64>) -> Result<Array2<f64>, DisentangleError> {
        if codes.ncols() != self.latent_dim {
            return Err(DisentangleError::CodeDimMismatch {
                expected: self.latent_dim,
                got: codes.ncols(),
            });
        }
        let tape = Tape::new();
        let params = inject_params(&tape, &self.params);
        let z = tape.leaf(codes.clone().into_dyn());
        let out = self.logits_on_tape(&params, &z).value();
        Ok(out
            .into_dimensionality()
            .expect("two fc columns give a 2-d result"))
    }
}

fn leaky_relu(x: &Var, slope: f64) -> Var {
    x.relu().sub(&x.neg().relu().scale(slope))
}

/// Shuffles every latent column independently across the batch, turning
/// samples of the joint posterior into samples of (approximately) the
/// product of its marginals.
pub fn permute_dims(codes: &Array2<f64>, seed: u64) -> Result<Array2<f64>, DisentangleError> {
    let (b, d) = codes.dim();
    if b < 2 {
        return Err(DisentangleError::BatchTooSmall(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = codes.clone();
    for col in 0..d {
        let mut rows: Vec<usize> = (0..b).collect();
        rows.shuffle(&mut rng);
        for (to, &from) in rows.iter().enumerate() {
            out[[to, col]] = codes[[from, col]];
        }
    }
    Ok(out)
}

/// Density-ratio total-correlation estimate: the batch-mean difference
/// between the joint and permuted logits.
fn tc_term(disc: &TcDiscriminator, disc_params: &ParamVars, z: &Var) -> Var {
    let logits = disc.logits_on_tape(disc_params, z);
    let picker = z
        .tape()
        .leaf(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, -1.0]).expect("static shape"));
    logits.matmul(&picker).mean_all()
}

/// Scalar loss components of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub tc: f64,
    pub ad: f64,
}

/// A live loss graph over one batch: the trace owns the tape, so gradients
/// for any parameter can still be pulled from `total`.
pub struct AdLossGraph {
    pub trace: EncodeTrace,
    pub z: Var,
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub tc: Option<Var>,
    pub ad: Option<Var>,
}

impl AdLossGraph {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            total: self.total.scalar(),
            recon: self.recon.scalar(),
            kl: self.kl.scalar(),
            tc: self.tc.as_ref().map_or(0.0, Var::scalar),
            ad: self.ad.as_ref().map_or(0.0, Var::scalar),
        }
    }
}

/// VAE objective plus `gamma` times the discriminator's total-correlation
/// estimate. With `gamma` zero the discriminator is skipped entirely and
/// the value equals the plain objective bit for bit.
pub fn factorvae_objective(
    vae: &Vae,
    disc: &TcDiscriminator,
    batch: &[ndarray::Array3<f64>],
    gamma: f64,
    noise_seed: u64,
) -> Result<AdLossGraph, DisentangleError> {
    if batch.len() < 2 {
        return Err(DisentangleError::BatchTooSmall(batch.len()));
    }
    if disc.latent_dim != vae.config.latent_dim {
        return Err(DisentangleError::CodeDimMismatch {
            expected: disc.latent_dim,
            got: vae.config.latent_dim,
        });
    }
    let tape = Tape::new();
    let params = inject_params(&tape, &vae.params);
    let x = tape.leaf(stack_images(batch));
    let trace = encode_on_tape(&tape, &params, &vae.config, &x);

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = tape.leaf(Arr::from_shape_simple_fn(
        IxDyn(&[batch.len(), vae.config.latent_dim]),
        || rng.sample::<f64, _>(StandardNormal),
    ));
    let z = reparameterize_var(&trace.mu, &trace.logvar, &eps);
    let xhat = decode_on_tape(&params, &vae.config, &z);
    let (recon, kl, plain_total) = vae_loss_vars(&x, &xhat, &trace.mu, &trace.logvar, 1.0);

    let (tc, total) = if gamma == 0.0 {
        (None, plain_total)
    } else {
        let disc_params = inject_params(&tape, &disc.params);
        let tc = tc_term(disc, &disc_params, &z);
        let total = plain_total.add(&tc.scale(gamma));
        (Some(tc), total)
    };
    Ok(AdLossGraph {
        trace,
        z,
        total,
        recon,
        kl,
        tc,
        ad: None,
    })
}

/// Sum of one chosen code entry per batch element, as a scalar target whose
/// per-element tap gradients stay independent.
fn masked_code_sum(z: &Var, picks: &[usize]) -> Var {
    let b = z.shape()[0];
    let d = z.shape()[1];
    let mut mask = Arr::zeros(IxDyn(&[b, d]));
    for (row, &dim) in picks.iter().enumerate() {
        mask[[row, dim]] = 1.0;
    }
    z.mul(&z.tape().leaf(mask)).sum_all()
}

fn pair_overlap(
    graph: &AdLossGraph,
    tap: &Var,
    layer: &str,
    first: &[usize],
    second: &[usize],
    norm: MapNormalization,
) -> Result<Var, DisentangleError> {
    let tape = &graph.trace.tape;
    let t1 = masked_code_sum(&graph.z, first);
    let t2 = masked_code_sum(&graph.z, second);
    let a1 = attention_map_var(tape, &t1, tap, layer)?;
    let a2 = attention_map_var(tape, &t2, tap, layer)?;
    Ok(overlap_term(&a1, &a2, norm))
}

/// The combined objective: the FactorVAE graph extended with
/// `lambda` times the attention overlap of the selected dim pairs. Maps are
/// built from the sampled codes with gradient flow intact, so the returned
/// total supports gradients through the attention computation itself.
/// `lambda` zero skips the attention machinery and returns the FactorVAE
/// graph unchanged.
pub fn ad_factorvae_loss(
    vae: &Vae,
    disc: &TcDiscriminator,
    batch: &[ndarray::Array3<f64>],
    gamma: f64,
    cfg: &AdConfig,
    noise_seed: u64,
) -> Result<AdLossGraph, DisentangleError> {
    cfg.validate(vae.config.latent_dim)?;
    let mut graph = factorvae_objective(vae, disc, batch, gamma, noise_seed)?;
    if cfg.lambda == 0.0 {
        return Ok(graph);
    }
    let d = vae.config.latent_dim;
    if d < 2 {
        return Err(DisentangleError::TooFewDims(d));
    }
    let layer = cfg.layer_for(&vae.config);
    let tap = graph
        .trace
        .tap(&layer)
        .ok_or_else(|| AttentionError::UnknownLayer(layer.clone()))?
        .clone();

    let ad = match cfg.pair_selection {
        PairSelection::Top2Response => {
            let codes = graph.z.value();
            let b = codes.shape()[0];
            let mut first = Vec::with_capacity(b);
            let mut second = Vec::with_capacity(b);
            for row in 0..b {
                let code: Vec<f64> = (0..d).map(|i| codes[[row, i]]).collect();
                let (i, j) = top2_by_response(&code)?;
                first.push(i);
                second.push(j);
            }
            pair_overlap(&graph, &tap, &layer, &first, &second, cfg.normalization)?
        }
        PairSelection::Fixed(i, j) => {
            let b = graph.z.shape()[0];
            pair_overlap(
                &graph,
                &tap,
                &layer,
                &vec![i; b],
                &vec![j; b],
                cfg.normalization,
            )?
        }
        PairSelection::AllPairs => {
            let tape = &graph.trace.tape;
            let b = graph.z.shape()[0];
            let maps: Vec<Var> = (0..d)
                .map(|i| {
                    let target = masked_code_sum(&graph.z, &vec![i; b]);
                    attention_map_var(tape, &target, &tap, &layer)
                })
                .collect::<Result<_, _>>()?;
            let mut acc: Option<Var> = None;
            let mut pairs = 0.0;
            for i in 0..d {
                for j in i + 1..d {
                    let o = overlap_term(&maps[i], &maps[j], cfg.normalization);
                    acc = Some(match acc {
                        Some(a) => a.add(&o),
                        None => o,
                    });
                    pairs += 1.0;
                }
            }
            acc.expect("d >= 2 yields at least one pair").scale(1.0 / pairs)
        }
    };
    graph.total = graph.total.add(&ad.scale(cfg.lambda));
    graph.ad = Some(ad);
    Ok(graph)
}

/// Two-class cross-entropy for the discriminator step: joint codes are
/// class 0, permuted codes class 1. Codes enter as constants; only the
/// discriminator parameters receive gradients.
pub fn discriminator_loss_graph(
    disc: &TcDiscriminator,
    joint: &Array2<f64>,
    permuted: &Array2<f64>,
) -> Result<(Tape, ParamVars, Var), DisentangleError> {
    for codes in [joint, permuted] {
        if codes.ncols() != disc.latent_dim {
            return Err(DisentangleError::CodeDimMismatch {
                expected: disc.latent_dim,
                got: codes.ncols(),
            });
        }
        if codes.nrows() < 2 {
            return Err(DisentangleError::BatchTooSmall(codes.nrows()));
        }
    }
    let tape = Tape::new();
    let params = inject_params(&tape, &disc.params);
    let picker = |sign: f64| {
        tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![-sign, sign]).expect("static shape"))
    };
    let joint_logits =
        disc.logits_on_tape(&params, &tape.leaf(joint.clone().into_dyn()));
    let perm_logits =
        disc.logits_on_tape(&params, &tape.leaf(permuted.clone().into_dyn()));
    let joint_ce = joint_logits.matmul(&picker(1.0)).softplus().mean_all();
    let perm_ce = perm_logits.matmul(&picker(-1.0)).softplus().mean_all();
    let loss = joint_ce.add(&perm_ce).scale(0.5);
    Ok((tape, params, loss))
}
