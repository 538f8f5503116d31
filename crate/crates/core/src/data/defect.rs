//! Synthetic defect-localization dataset: smoothed-noise textures for
//! one-class training, plus test images with an inserted defect whose binary
//! mask is exact by construction.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetManifest, ImageSample, Label, Split};
use crate::util::{derive_seed, resize_bilinear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Blob,
    Scratch,
    Occlusion,
}

/// Whether defects brighten the texture, darken it, or flip a coin per
/// image. Occlusions fill with the corresponding extreme value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectPolarity {
    Bright,
    Dark,
    Mixed,
}

#[derive(Clone, Copy, Debug)]
pub struct DefectParams {
    pub kind: DefectKind,
    /// Allowed mask area as a fraction of image area (blob and occlusion).
    pub area_band: (f64, f64),
    /// Intensity shift applied inside blob and scratch defects.
    pub contrast: f64,
    pub polarity: DefectPolarity,
}

impl DefectParams {
    pub fn new(kind: DefectKind) -> Self {
        DefectParams {
            kind,
            area_band: (0.01, 0.06),
            contrast: 0.5,
            polarity: DefectPolarity::Mixed,
        }
    }
}

/// Generates `(train, test)` manifests: `n_normal` defect-free textures and
/// `n_abnormal` defective ones with ground-truth masks. The training split is
/// one-class by construction.
pub fn gen_defect_dataset(
    n_normal: usize,
    n_abnormal: usize,
    resolution: usize,
    kind: DefectKind,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    gen_defect_dataset_with(n_normal, n_abnormal, resolution, &DefectParams::new(kind), seed)
}

pub fn gen_defect_dataset_with(
    n_normal: usize,
    n_abnormal: usize,
    resolution: usize,
    params: &DefectParams,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if n_normal == 0 || n_abnormal == 0 {
        return Err(DataError::InvalidParameter(
            "normal and abnormal counts must be at least 1".into(),
        ));
    }
    if resolution < 16 {
        return Err(DataError::InvalidParameter(format!(
            "resolution must be at least 16, got {resolution}"
        )));
    }
    let (lo, hi) = params.area_band;
    if !(0.0 < lo && lo < hi && hi < 0.5) {
        return Err(DataError::InvalidParameter(format!(
            "area band ({lo}, {hi}) must satisfy 0 < lo < hi < 0.5"
        )));
    }

    let train = (0..n_normal)
        .map(|i| {
            let texture = texture_image(resolution, derive_seed(seed, &format!("normal-{i}")));
            ImageSample::new(texture, None, Label::Normal, format!("normal-{i:04}"))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let test = (0..n_abnormal)
        .map(|i| {
            let img_seed = derive_seed(seed, &format!("abnormal-{i}"));
            let mut pixels = texture_image(resolution, img_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(img_seed, "defect"));
            let mask = insert_defect(&mut pixels, params, &mut rng);
            debug_assert!(mask.iter().any(|&m| m == 1), "defect mask must be nonempty");
            ImageSample::new(pixels, Some(mask), Label::Abnormal, format!("defect-{i:04}"))
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok((
        DatasetManifest::new(Split::Train, "synthetic-defect", train)?,
        DatasetManifest::new(Split::Test, "synthetic-defect", test)?,
    ))
}

/// Smoothed value noise in [0.35, 0.65]: a coarse random grid upsampled
/// bilinearly, leaving intensity headroom for defects in both directions.
fn texture_image(resolution: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (resolution / 8).max(2) + 1;
    let coarse = Array2::from_shape_simple_fn((cells, cells), || rng.random::<f64>());
    let smooth = resize_bilinear(&coarse, resolution, resolution);
    let mut out = Array3::zeros((resolution, resolution, 1));
    out.index_axis_mut(ndarray::Axis(2), 0)
        .assign(&smooth.mapv(|v| 0.35 + 0.3 * v));
    out
}

fn insert_defect(
    pixels: &mut Array3<f64>,
    params: &DefectParams,
    rng: &mut ChaCha8Rng,
) -> Array2<u8> {
    match params.kind {
        DefectKind::Blob => insert_banded(pixels, params, rng, false),
        DefectKind::Occlusion => insert_banded(pixels, params, rng, true),
        DefectKind::Scratch => insert_scratch(pixels, params, rng),
    }
}

/// Places an ellipse (blob) or rotated rectangle (occlusion) whose pixel area
/// lands inside the configured band, resampling parameters until it does.
fn insert_banded(
    pixels: &mut Array3<f64>,
    params: &DefectParams,
    rng: &mut ChaCha8Rng,
    rectangle: bool,
) -> Array2<u8> {
    let (h, w, _) = pixels.dim();
    let n = h.min(w) as f64;
    let (lo, hi) = params.area_band;
    let pad = 0.15 * (hi - lo);
    let total = (h * w) as f64;
    let mut best: Option<(f64, Array2<u8>)> = None;

    for _ in 0..64 {
        let target = total * rng.random_range(lo + pad..hi - pad);
        let aspect = rng.random_range(1.0..2.5);
        let (r1, r2) = if rectangle {
            // Rectangle area = 4 r1 r2 for half-extents r1, r2.
            let r1 = (target * aspect / 4.0).sqrt();
            (r1, (r1 / aspect).max(1.5))
        } else {
            let r1 = (target * aspect / std::f64::consts::PI).sqrt();
            (r1, (r1 / aspect).max(1.5))
        };
        let rmax = r1.max(r2);
        if 2.0 * rmax + 2.0 >= n {
            continue;
        }
        let cx = rng.random_range(rmax + 1.0..w as f64 - rmax - 1.0);
        let cy = rng.random_range(rmax + 1.0..h as f64 - rmax - 1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();

        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            let dx = (x as f64 + 0.5) - cx;
            let dy = (y as f64 + 0.5) - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let hit = if rectangle {
                u.abs() <= r1 && v.abs() <= r2
            } else {
                (u / r1).powi(2) + (v / r2).powi(2) <= 1.0
            };
            u8::from(hit)
        });
        let area = mask.iter().map(|&m| f64::from(m)).sum::<f64>() / total;
        if area >= lo && area <= hi {
            apply_defect(pixels, &mask, params, rng, rectangle);
            return mask;
        }
        let miss = (area - (lo + hi) / 2.0).abs();
        if best.as_ref().is_none_or(|(b, _)| miss < *b) {
            best = Some((miss, mask));
        }
    }
    // All attempts missed the band (possible only for extreme bands); use the
    // closest mask so the contract "at least one positive pixel" still holds.
    let (_, mask) = best.expect("at least one candidate mask was generated");
    apply_defect(pixels, &mask, params, rng, rectangle);
    mask
}

fn apply_defect(
    pixels: &mut Array3<f64>,
    mask: &Array2<u8>,
    params: &DefectParams,
    rng: &mut ChaCha8Rng,
    constant_fill: bool,
) {
    let coin = rng.random::<bool>();
    let bright = match params.polarity {
        DefectPolarity::Bright => true,
        DefectPolarity::Dark => false,
        DefectPolarity::Mixed => coin,
    };
    let (h, w, c) = pixels.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 0 {
                continue;
            }
            for ch in 0..c {
                let v = &mut pixels[(y, x, ch)];
                *v = if constant_fill {
                    if bright {
                        0.95
                    } else {
                        0.05
                    }
                } else if bright {
                    (*v + params.contrast).min(1.0)
                } else {
                    (*v - params.contrast).max(0.0)
                };
            }
        }
    }
}

fn insert_scratch(
    pixels: &mut Array3<f64>,
    params: &DefectParams,
    rng: &mut ChaCha8Rng,
) -> Array2<u8> {
    let contrast = params.contrast;
    let (h, w, c) = pixels.dim();
    let n = h.min(w) as f64;
    let len = rng.random_range(0.3 * n..0.6 * n);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let half = len / 2.0;
    let cx = rng.random_range(half + 1.0..w as f64 - half - 1.0);
    let cy = rng.random_range(half + 1.0..h as f64 - half - 1.0);
    let (dy, dx) = theta.sin_cos();
    let (x0, y0) = (cx - dx * half, cy - dy * half);
    let (x1, y1) = (cx + dx * half, cy + dy * half);
    let width = rng.random_range(1.0..2.0);
    let coin = rng.random::<bool>();
    let bright = match params.polarity {
        DefectPolarity::Bright => true,
        DefectPolarity::Dark => false,
        DefectPolarity::Mixed => coin,
    };

    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let d = dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, x0, y0, x1, y1);
        u8::from(d <= width)
    });
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 1 {
                for ch in 0..c {
                    let v = &mut pixels[(y, x, ch)];
                    *v = if bright {
                        (*v + contrast).min(1.0)
                    } else {
                        (*v - contrast).max(0.0)
                    };
                }
            }
        }
    }
    mask
}

fn dist_to_segment(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (x0 + t * vx, y0 + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}
