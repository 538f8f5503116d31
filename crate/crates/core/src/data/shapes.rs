//! Procedural factor-grid dataset: binary images of a square, ellipse, or
//! heart placed on a grid of scales, orientations, and positions. The full
//! Cartesian product of factor values is addressable by ordinal, so the
//! dataset is rendered lazily instead of materialized.

use ndarray::Array3;

use super::{DataError, ImageSample, ImageSource, Label};

const FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "pos-x", "pos-y"];
const N_SHAPES: usize = 3;
const MIN_SIZE_FRAC: f64 = 0.18;
const MAX_SIZE_FRAC: f64 = 0.35;

/// Ordered generative factors and their cardinalities, with the mixed-radix
/// bijection between sample ordinals and factor index tuples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpec {
    cardinalities: Vec<usize>,
}

impl FactorSpec {
    pub fn names(&self) -> &'static [&'static str; 5] {
        &FACTOR_NAMES
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn n_factors(&self) -> usize {
        self.cardinalities.len()
    }

    /// Total number of factor combinations.
    pub fn count(&self) -> usize {
        self.cardinalities.iter().product()
    }

    /// Decodes an ordinal into one index per factor (first factor varies
    /// slowest).
    pub fn factors_of(&self, ordinal: usize) -> Vec<usize> {
        assert!(ordinal < self.count(), "ordinal {ordinal} out of range");
        let mut rest = ordinal;
        let mut out = vec![0; self.cardinalities.len()];
        for (slot, &card) in out.iter_mut().zip(&self.cardinalities).rev() {
            *slot = rest % card;
            rest /= card;
        }
        out
    }

    /// Inverse of [`factors_of`](Self::factors_of).
    pub fn ordinal_of(&self, factors: &[usize]) -> usize {
        assert_eq!(factors.len(), self.cardinalities.len(), "factor arity mismatch");
        let mut ordinal = 0;
        for (&f, &card) in factors.iter().zip(&self.cardinalities) {
            assert!(f < card, "factor index {f} exceeds cardinality {card}");
            ordinal = ordinal * card + f;
        }
        ordinal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Ellipse,
    Heart,
}

/// Lazily rendered factor-grid dataset. Rendering is a pure function of the
/// spec and ordinal; the seed only names derived sampling streams used by
/// consumers (subset selection, vote batches).
#[derive(Clone, Debug)]
pub struct FactorDataset {
    pub spec: FactorSpec,
    pub resolution: usize,
    pub seed: u64,
}

/// Builds the dataset over the full Cartesian product of factor values.
///
/// `cardinalities` are (shape ≤ 3, scale, orientation, pos-x, pos-y); the
/// full-size default is `[3, 6, 40, 32, 32]`, 737,280 images.
pub fn gen_shapes_dataset(
    cardinalities: &[usize],
    resolution: usize,
    seed: u64,
) -> Result<FactorDataset, DataError> {
    if cardinalities.len() != 5 {
        return Err(DataError::InvalidParameter(format!(
            "expected 5 factor cardinalities, got {}",
            cardinalities.len()
        )));
    }
    if cardinalities.iter().any(|&c| c == 0) {
        return Err(DataError::InvalidParameter(
            "factor cardinalities must be at least 1".into(),
        ));
    }
    if cardinalities[0] > N_SHAPES {
        return Err(DataError::InvalidParameter(format!(
            "at most {N_SHAPES} shapes available, got cardinality {}",
            cardinalities[0]
        )));
    }
    if resolution < 16 {
        return Err(DataError::InvalidParameter(format!(
            "resolution must be at least 16, got {resolution}"
        )));
    }
    let ds = FactorDataset {
        spec: FactorSpec {
            cardinalities: cardinalities.to_vec(),
        },
        resolution,
        seed,
    };
    // Render the smallest configuration of each shape once; a shape that
    // rasterizes to nothing at this resolution would poison every consumer.
    for shape_idx in 0..cardinalities[0] {
        let mut factors = vec![0; 5];
        factors[0] = shape_idx;
        let img = ds.image(ds.spec.ordinal_of(&factors));
        if img.iter().all(|&v| v == 0.0) {
            return Err(DataError::DegenerateRender(format!(
                "shape {} has no pixels at resolution {resolution}",
                FACTOR_NAMES[0]
            )));
        }
    }
    Ok(ds)
}

impl FactorDataset {
    /// Renders the binary image for one ordinal, values in {0.0, 1.0}.
    pub fn image(&self, ordinal: usize) -> Array3<f64> {
        let f = self.spec.factors_of(ordinal);
        self.render(&f)
    }

    pub fn sample(&self, ordinal: usize) -> ImageSample {
        ImageSample::new(
            self.image(ordinal),
            None,
            Label::Normal,
            format!("shape-{ordinal}"),
        )
        .expect("rendered shapes are always in range")
    }

    fn render(&self, factors: &[usize]) -> Array3<f64> {
        let res = self.resolution as f64;
        let cards = self.spec.cardinalities();
        let shape = match factors[0] {
            0 => Shape::Square,
            1 => Shape::Ellipse,
            _ => Shape::Heart,
        };
        let size = res * (MIN_SIZE_FRAC + (MAX_SIZE_FRAC - MIN_SIZE_FRAC) * frac(factors[1], cards[1]));
        let theta = std::f64::consts::TAU * factors[2] as f64 / cards[2] as f64;
        // The farthest point of a rotated shape sits SQRT_2/2 of its size
        // from the center, so this margin keeps every shape fully inside.
        let margin = res * MAX_SIZE_FRAC * std::f64::consts::FRAC_1_SQRT_2 + 1.0;
        let cx = margin + frac(factors[3], cards[3]) * (res - 2.0 * margin);
        let cy = margin + frac(factors[4], cards[4]) * (res - 2.0 * margin);
        let (sin_t, cos_t) = theta.sin_cos();

        let n = self.resolution;
        Array3::from_shape_fn((n, n, 1), |(y, x, _)| {
            let dx = (x as f64 + 0.5) - cx;
            let dy = (y as f64 + 0.5) - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            f64::from(inside(shape, u, v, size))
        })
    }
}

/// Evenly spaced factor value in [0,1]; a singleton factor sits at the middle.
fn frac(index: usize, cardinality: usize) -> f64 {
    if cardinality <= 1 {
        0.5
    } else {
        index as f64 / (cardinality - 1) as f64
    }
}

fn inside(shape: Shape, u: f64, v: f64, size: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= size / 2.0 && v.abs() <= size / 2.0,
        Shape::Ellipse => {
            let a = size / 2.0;
            let b = size / 4.0;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        }
        Shape::Heart => {
            // Implicit heart curve (x^2 + y^2 - 1)^3 <= x^2 y^3, y up,
            // rescaled so the curve's bounding box spans `size` pixels.
            let x = u * 2.27 / size;
            let y = -v * 2.27 / size + 0.135;
            (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
        }
    }
}

impl ImageSource for FactorDataset {
    fn count(&self) -> usize {
        self.spec.count()
    }

    fn image(&self, index: usize) -> Array3<f64> {
        FactorDataset::image(self, index)
    }
}
