//! Deterministic training-time augmentation (mirroring, rotation) and
//! sample resizing.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ImageSample};
use crate::util::resize_channels;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AngleSet {
    /// Rotations from {0°, 90°, 180°, 270°}; exact, no resampling.
    Quarter,
    /// A uniform angle in [-max_degrees, max_degrees], resampled bilinearly
    /// with reflection padding.
    Uniform { max_degrees: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub angles: AngleSet,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            angles: AngleSet::Quarter,
        }
    }
}

/// Applies a seeded random mirror and rotation. Only mask-free samples are
/// accepted: augmentation is for one-class training inputs, not for test
/// samples with ground truth attached.
pub fn augment(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<ImageSample, DataError> {
    if sample.mask().is_some() {
        return Err(DataError::AugmentOnMasked(sample.source_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = sample.pixels().clone();
    if rng.random::<f64>() < cfg.mirror_prob {
        pixels = mirror_x(&pixels);
    }
    pixels = match cfg.angles {
        AngleSet::Quarter => {
            let quarters = rng.random_range(0..4u8);
            rotate_quarters(&pixels, quarters)
        }
        AngleSet::Uniform { max_degrees } => {
            let angle = rng.random_range(-max_degrees..=max_degrees).to_radians();
            rotate_arbitrary(&pixels, angle)
        }
    };
    ImageSample::new(pixels, None, sample.label, sample.source_id.clone())
}

pub fn augment_pixels(pixels: &Array3<f64>, cfg: &AugmentConfig, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pixels.clone();
    if rng.random::<f64>() < cfg.mirror_prob {
        out = mirror_x(&out);
    }
    match cfg.angles {
        AngleSet::Quarter => rotate_quarters(&out, rng.random_range(0..4u8)),
        AngleSet::Uniform { max_degrees } => {
            let angle = rng.random_range(-max_degrees..=max_degrees).to_radians();
            rotate_arbitrary(&out, angle)
        }
    }
}

fn mirror_x(pixels: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[(y, w - 1 - x, ch)])
}

fn rotate_quarters(pixels: &Array3<f64>, quarters: u8) -> Array3<f64> {
    let mut out = pixels.clone();
    for _ in 0..(quarters % 4) {
        let (h, w, c) = out.dim();
        // One clockwise quarter turn: (y, x) of the rotated image reads
        // (h-1-x, y) of the source, and the output is w×h.
        out = Array3::from_shape_fn((w, h, c), |(y, x, ch)| out[(h - 1 - x, y, ch)]);
    }
    out
}

fn rotate_arbitrary(pixels: &Array3<f64>, angle: f64) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin_a, cos_a) = angle.sin_cos();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = cx + dx * cos_a - dy * sin_a;
        let sy = cy + dx * sin_a + dy * cos_a;
        bilinear_reflect(pixels, sy, sx, ch)
    })
}

fn bilinear_reflect(pixels: &Array3<f64>, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w, _) = pixels.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let sample = |yy: f64, xx: f64| {
        pixels[(reflect(yy as isize, h), reflect(xx as isize, w), ch)]
    };
    sample(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + sample(y0, x0 + 1.0) * (1.0 - dy) * dx
        + sample(y0 + 1.0, x0) * dy * (1.0 - dx)
        + sample(y0 + 1.0, x0 + 1.0) * dy * dx
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMethod {
    Bilinear,
    Nearest,
}

/// Resizes a sample's pixels with the requested method; any mask is resized
/// nearest-neighbor so it stays binary.
pub fn resize(sample: &ImageSample, h: usize, w: usize, method: ResizeMethod) -> ImageSample {
    let pixels = resize_channels(sample.pixels(), h, w, method == ResizeMethod::Nearest);
    let mask = sample.mask().map(|m| {
        let float = m.mapv(f64::from);
        crate::util::resize_nearest(&float, h, w).mapv(|v| v as u8)
    });
    ImageSample::new(pixels, mask, sample.label, sample.source_id.clone())
        .expect("resizing preserves sample invariants")
}
