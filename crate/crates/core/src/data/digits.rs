//! Self-contained stroke-rendered digit dataset in the MNIST format niche:
//! grayscale digits 0-9 with per-sample jitter, for demos and digit-protocol
//! experiments without downloading anything.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetManifest, ImageSample, Label, Split};
use crate::util::derive_seed;

type Point = (f64, f64);

/// Stroke skeletons in a unit box, y pointing down.
fn strokes(digit: u8) -> Vec<Vec<Point>> {
    match digit {
        0 => vec![ellipse((0.5, 0.5), 0.22, 0.32)],
        1 => vec![vec![(0.38, 0.26), (0.52, 0.14), (0.52, 0.86)]],
        2 => vec![
            vec![
                (0.28, 0.32),
                (0.32, 0.2),
                (0.45, 0.13),
                (0.6, 0.14),
                (0.7, 0.24),
                (0.7, 0.36),
                (0.6, 0.5),
                (0.45, 0.62),
                (0.32, 0.74),
                (0.28, 0.85),
            ],
            vec![(0.28, 0.85), (0.74, 0.85)],
        ],
        3 => vec![
            vec![
                (0.3, 0.2),
                (0.4, 0.12),
                (0.58, 0.12),
                (0.68, 0.22),
                (0.68, 0.34),
                (0.58, 0.44),
                (0.46, 0.48),
            ],
            vec![
                (0.46, 0.48),
                (0.6, 0.5),
                (0.7, 0.6),
                (0.7, 0.74),
                (0.58, 0.86),
                (0.4, 0.88),
                (0.3, 0.8),
            ],
        ],
        4 => vec![
            vec![(0.58, 0.12), (0.3, 0.58), (0.74, 0.58)],
            vec![(0.6, 0.3), (0.6, 0.88)],
        ],
        5 => vec![
            vec![(0.68, 0.14), (0.34, 0.14), (0.32, 0.45)],
            vec![
                (0.32, 0.45),
                (0.5, 0.42),
                (0.66, 0.5),
                (0.7, 0.64),
                (0.62, 0.8),
                (0.45, 0.87),
                (0.3, 0.8),
            ],
        ],
        6 => vec![vec![
            (0.62, 0.12),
            (0.45, 0.3),
            (0.34, 0.5),
            (0.32, 0.68),
            (0.4, 0.84),
            (0.58, 0.86),
            (0.68, 0.74),
            (0.66, 0.58),
            (0.52, 0.5),
            (0.36, 0.56),
        ]],
        7 => vec![
            vec![(0.26, 0.16), (0.74, 0.16)],
            vec![(0.74, 0.16), (0.46, 0.88)],
        ],
        8 => vec![ellipse((0.5, 0.32), 0.16, 0.17), ellipse((0.5, 0.67), 0.2, 0.2)],
        9 => vec![
            ellipse((0.52, 0.34), 0.17, 0.2),
            vec![(0.69, 0.36), (0.64, 0.6), (0.56, 0.88)],
        ],
        _ => panic!("digit {digit} out of range"),
    }
}

fn ellipse(center: Point, rx: f64, ry: f64) -> Vec<Point> {
    (0..=28)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / 28.0;
            (center.0 + rx * t.cos(), center.1 + ry * t.sin())
        })
        .collect()
}

/// Renders one digit with jittered placement, rotation, scale, and stroke
/// thickness drawn from `rng`. Output is H×W×1 grayscale in [0,1].
pub fn render_digit(digit: u8, resolution: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    assert!(digit < 10, "digit {digit} out of range");
    let shift: Point = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let rot = rng.random_range(-0.15..0.15f64);
    let scale = rng.random_range(0.88..1.1);
    let thickness = rng.random_range(0.05..0.075);
    let (sin_r, cos_r) = rot.sin_cos();

    let segs: Vec<(Point, Point)> = strokes(digit)
        .iter()
        .flat_map(|poly| {
            let pts: Vec<Point> = poly
                .iter()
                .map(|&(x, y)| {
                    let (dx, dy) = (x - 0.5, y - 0.5);
                    (
                        0.5 + scale * (dx * cos_r - dy * sin_r) + shift.0,
                        0.5 + scale * (dx * sin_r + dy * cos_r) + shift.1,
                    )
                })
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();

    let res = resolution as f64;
    Array3::from_shape_fn((resolution, resolution, 1), |(y, x, _)| {
        let px = (x as f64 + 0.5) / res;
        let py = (y as f64 + 0.5) / res;
        let d = segs
            .iter()
            .map(|&((x0, y0), (x1, y1))| dist_to_segment(px, py, x0, y0, x1, y1))
            .fold(f64::INFINITY, f64::min);
        ((thickness - d) / 0.02).clamp(0.0, 1.0)
    })
}

fn dist_to_segment(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    ((px - (x0 + t * vx)).powi(2) + (py - (y0 + t * vy)).powi(2)).sqrt()
}

/// Generates `n_per_class` samples of each digit 0-9, labeled by class.
pub fn gen_digits_dataset(
    n_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    if n_per_class == 0 {
        return Err(DataError::InvalidParameter("n_per_class must be at least 1".into()));
    }
    if resolution < 16 {
        return Err(DataError::InvalidParameter(format!(
            "resolution must be at least 16, got {resolution}"
        )));
    }
    let mut samples = Vec::with_capacity(n_per_class * 10);
    for digit in 0..10u8 {
        for i in 0..n_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("digit-{digit}-{i}")));
            let pixels = render_digit(digit, resolution, &mut rng);
            samples.push(ImageSample::new(
                pixels,
                None,
                Label::Class(digit),
                format!("digit{digit}-{i:04}"),
            )?);
        }
    }
    DatasetManifest::new(Split::Train, "stroke-digits", samples)
}
