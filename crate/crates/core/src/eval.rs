//! Pixel-level localization scoring. Maps and ground-truth masks from a
//! whole test category are pooled into one scored pixel set; from that we
//! build an exact tie-grouped ROC curve, its trapezoidal area, and the best
//! intersection-over-union across the threshold sweep, for gradient
//! attention and for the reconstruction-difference baseline.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    anomaly_attention, AnomalyMode, AnomalyOptions, AttentionError, NormalStats,
};
use crate::data::{DatasetManifest, ImageSample};
use crate::model::{ModelError, Vae};
use crate::util::{atomic_write, derive_seed, minmax_normalize};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("truth labels must be 0 or 1")]
    NonBinaryTruth,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("map shape {map:?} does not match mask shape {mask:?}")]
    MapMaskMismatch {
        map: (usize, usize),
        mask: (usize, usize),
    },
    #[error("roc needs at least one positive and one negative pixel")]
    UndefinedRoc,
    #[error("sample {0} has no ground-truth mask")]
    MissingMask(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Flattened scores with parallel binary ground truth, pooled over every
/// pixel of a category. ROC construction additionally requires at least one
/// positive and one negative entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredPixelSet {
    scores: Vec<f64>,
    truth: Vec<u8>,
}

impl ScoredPixelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(scores: Vec<f64>, truth: Vec<u8>) -> Result<Self, EvalError> {
        if scores.len() != truth.len() {
            return Err(EvalError::LengthMismatch(scores.len(), truth.len()));
        }
        if truth.iter().any(|t| *t > 1) {
            return Err(EvalError::NonBinaryTruth);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore);
        }
        Ok(ScoredPixelSet { scores, truth })
    }

    /// Appends one image's map against its mask, row by row.
    pub fn push_map(&mut self, map: &Array2<f64>, mask: &Array2<u8>) -> Result<(), EvalError> {
        if map.dim() != mask.dim() {
            return Err(EvalError::MapMaskMismatch {
                map: map.dim(),
                mask: mask.dim(),
            });
        }
        for (s, t) in map.iter().zip(mask.iter()) {
            if !s.is_finite() {
                return Err(EvalError::NonFiniteScore);
            }
            if *t > 1 {
                return Err(EvalError::NonBinaryTruth);
            }
            self.scores.push(*s);
            self.truth.push(*t);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.truth.iter().filter(|t| **t == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }
}

/// One operating point: everything scoring at least `threshold` is
/// predicted anomalous.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points at every distinct score, descending, with the empty
/// prediction (threshold +inf) first; ends at (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }
}

/// Exact ROC: scores are sorted once; pixels sharing a score flip together
/// as one tie group.
pub fn roc_curve(set: &ScoredPixelSet) -> Result<RocCurve, EvalError> {
    let p = set.n_pos();
    let n = set.n_neg();
    if p == 0 || n == 0 {
        return Err(EvalError::UndefinedRoc);
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores validated finite")
    });

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == s {
            if set.truth[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
        i = j;
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve; with tie groups interpolated linearly
/// this equals the probability that a random positive outscores a random
/// negative, counting ties as one half.
pub fn auroc(curve: &RocCurve) -> f64 {
    let pts = curve.points();
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    area
}

/// Best intersection-over-union across every distinct threshold, with the
/// threshold that achieves it. Ties prefer the higher threshold.
pub fn best_iou(set: &ScoredPixelSet) -> Result<(f64, f64), EvalError> {
    best_iou_capped(set, None)
}

/// Like [`best_iou`] but optionally restricted to a quantile subsample of
/// the distinct thresholds, trading exactness for speed on huge sets.
pub fn best_iou_capped(
    set: &ScoredPixelSet,
    cap: Option<usize>,
) -> Result<(f64, f64), EvalError> {
    let p = set.n_pos();
    if p == 0 || set.n_neg() == 0 {
        return Err(EvalError::UndefinedRoc);
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores validated finite")
    });

    let keep = |group_index: usize, total_groups: usize| -> bool {
        match cap {
            Some(k) if total_groups > k => {
                let stride = total_groups as f64 / k as f64;
                let slot = (group_index as f64 / stride) as usize;
                let representative = (slot as f64 * stride).ceil() as usize;
                group_index == representative.min(total_groups - 1)
            }
            _ => true,
        }
    };

    let total_groups = {
        let mut g = 0;
        let mut i = 0;
        while i < order.len() {
            let s = set.scores[order[i]];
            while i < order.len() && set.scores[order[i]] == s {
                i += 1;
            }
            g += 1;
        }
        g
    };

    let mut best = f64::NEG_INFINITY;
    let mut best_t = f64::NAN;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    let mut group = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if keep(group, total_groups) {
            let iou = tp as f64 / (p + fp) as f64;
            if iou > best {
                best = iou;
                best_t = s;
            }
        }
        group += 1;
    }
    Ok((best, best_t))
}

/// Channel-averaged absolute difference between an image and its
/// reconstruction.
pub fn recon_diff_map(
    x: &Array3<f64>,
    xhat: &Array3<f64>,
) -> Result<Array2<f64>, EvalError> {
    if x.dim() != xhat.dim() {
        let (h, w, _) = x.dim();
        let (h2, w2, _) = xhat.dim();
        return Err(EvalError::MapMaskMismatch {
            map: (h, w),
            mask: (h2, w2),
        });
    }
    let (h, w, c) = x.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, xx)| {
        (0..c)
            .map(|k| (x[[y, xx, k]] - xhat[[y, xx, k]]).abs())
            .sum::<f64>()
            / c as f64
    }))
}

/// Which scoring methods to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSelect {
    Attention,
    Recon,
    Both,
}

/// One concrete scoring method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    Attention,
    Recon,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Attention => "attention",
            MethodKind::Recon => "recon",
        }
    }
}

impl MethodSelect {
    pub fn kinds(self) -> Vec<MethodKind> {
        match self {
            MethodSelect::Attention => vec![MethodKind::Attention],
            MethodSelect::Recon => vec![MethodKind::Recon],
            MethodSelect::Both => vec![MethodKind::Attention, MethodKind::Recon],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub method: MethodSelect,
    pub layer: String,
    pub mode: AnomalyMode,
    pub absolute_score: bool,
    /// Min-max normalize each image's map before pooling.
    pub normalize_per_image: bool,
    /// Optional quantile cap on the IOU threshold sweep.
    pub iou_threshold_cap: Option<usize>,
}

impl EvalOptions {
    pub fn new(layer: impl Into<String>) -> Self {
        EvalOptions {
            method: MethodSelect::Both,
            layer: layer.into(),
            mode: AnomalyMode::SumMu,
            absolute_score: false,
            normalize_per_image: true,
            iou_threshold_cap: None,
        }
    }
}

/// Scores of one method over one pooled category.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub layer: String,
    pub auroc: f64,
    pub best_iou: f64,
    pub best_threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub category: String,
    pub entries: Vec<MethodReport>,
}

/// Raw (un-normalized) score maps for one image under the selected methods.
pub fn method_maps(
    vae: &Vae,
    image: &Array3<f64>,
    opts: &EvalOptions,
    stats: Option<&NormalStats>,
    seed: u64,
) -> Result<Vec<(MethodKind, Array2<f64>)>, EvalError> {
    let mut out = Vec::new();
    for kind in opts.method.kinds() {
        let map = match kind {
            MethodKind::Attention => {
                let aopts = AnomalyOptions {
                    mode: opts.mode,
                    layer: opts.layer.clone(),
                    absolute_score: opts.absolute_score,
                };
                anomaly_attention(vae, image, &aopts, stats, seed)?
                    .values()
                    .clone()
            }
            MethodKind::Recon => {
                let xhat = vae.reconstruct(image)?;
                recon_diff_map(image, &xhat)?
            }
        };
        out.push((kind, map));
    }
    Ok(out)
}

/// Builds per-method reports from pooled pixel sets.
pub fn report_from_sets(
    category: &str,
    layer: &str,
    sets: &[(MethodKind, ScoredPixelSet)],
    cap: Option<usize>,
) -> Result<LocalizationReport, EvalError> {
    let mut entries = Vec::with_capacity(sets.len());
    for (kind, set) in sets {
        let curve = roc_curve(set)?;
        let (iou, threshold) = best_iou_capped(set, cap)?;
        entries.push(MethodReport {
            method: kind.as_str().to_string(),
            layer: match kind {
                MethodKind::Attention => layer.to_string(),
                MethodKind::Recon => "-".to_string(),
            },
            auroc: auroc(&curve),
            best_iou: iou,
            best_threshold: threshold,
            n_pos: set.n_pos(),
            n_neg: set.n_neg(),
        });
    }
    Ok(LocalizationReport {
        category: category.to_string(),
        entries,
    })
}

fn sample_mask(sample: &ImageSample) -> Result<&Array2<u8>, EvalError> {
    sample
        .mask()
        .ok_or_else(|| EvalError::MissingMask(sample.source_id.clone()))
}

/// Pools every test pixel of a category and scores the selected methods.
/// The per-sample seed is derived from the category seed and the sample id,
/// so evaluation order cannot change any map.
pub fn evaluate_category(
    vae: &Vae,
    test: &DatasetManifest,
    opts: &EvalOptions,
    stats: Option<&NormalStats>,
    seed: u64,
) -> Result<LocalizationReport, EvalError> {
    let kinds = opts.method.kinds();
    let mut sets: Vec<(MethodKind, ScoredPixelSet)> = kinds
        .iter()
        .map(|k| (*k, ScoredPixelSet::new()))
        .collect();
    for sample in test.samples() {
        let mask = sample_mask(sample)?;
        let maps = method_maps(
            vae,
            sample.pixels(),
            opts,
            stats,
            derive_seed(seed, &sample.source_id),
        )?;
        for ((_, set), (_, map)) in sets.iter_mut().zip(maps) {
            let map = if opts.normalize_per_image {
                minmax_normalize(&map)
            } else {
                map
            };
            set.push_map(&map, mask)?;
        }
    }
    report_from_sets(&test.category, &opts.layer, &sets, opts.iou_threshold_cap)
}

/// Appends reports as CSV rows, writing the header first.
pub fn write_report_csv(
    path: &Path,
    reports: &[LocalizationReport],
) -> Result<(), EvalError> {
    let mut out = String::from(
        "category,method,layer,auroc,best_iou,best_threshold,n_pos,n_neg\n",
    );
    for report in reports {
        for e in &report.entries {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{},{}\n",
                report.category,
                e.method,
                e.layer,
                e.auroc,
                e.best_iou,
                e.best_threshold,
                e.n_pos,
                e.n_neg
            ));
        }
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}
