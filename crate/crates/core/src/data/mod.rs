//! Dataset generation and loading: factor-grid shapes, defect textures,
//! stroke digits, IDX files, and MVTec-style folder trees, plus deterministic
//! augmentation and resizing.

mod augment;
mod defect;
mod digits;
mod folder;
mod idx;
mod shapes;

pub use augment::{augment, augment_pixels, resize, AngleSet, AugmentConfig, ResizeMethod};
pub use defect::{
    gen_defect_dataset, gen_defect_dataset_with, DefectKind, DefectParams, DefectPolarity,
};
pub use digits::{gen_digits_dataset, render_digit};
pub use folder::{export_folder_dataset, load_folder_dataset, FolderOptions};
pub use idx::{load_idx_images, write_idx_images, write_idx_labels};
pub use shapes::{gen_shapes_dataset, FactorDataset, FactorSpec};

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    MapIo(#[from] crate::mapio::MapIoError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("pixels out of [0,1] range in sample {0}")]
    PixelRange(String),
    #[error("mask shape or values invalid in sample {0}")]
    BadMask(String),
    #[error("shape unrenderable at this resolution: {0}")]
    DegenerateRender(String),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("no ground-truth mask found for test image {0}")]
    MissingMask(String),
    #[error("augmentation requires a mask-free sample, got {0}")]
    AugmentOnMasked(String),
}

/// How a sample is labeled. One-class training uses only `Normal`; classed
/// datasets (digits) carry their class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Normal,
    Abnormal,
    Class(u8),
}

impl Label {
    pub fn is_abnormal(&self) -> bool {
        matches!(self, Label::Abnormal)
    }
}

/// One image with optional pixel-level ground truth.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pixels: Array3<f64>,
    mask: Option<Array2<u8>>,
    pub label: Label,
    pub source_id: String,
}

impl ImageSample {
    /// Validates the container invariants: pixels in [0,1], mask binary and
    /// the same height/width as the pixels.
    pub fn new(
        pixels: Array3<f64>,
        mask: Option<Array2<u8>>,
        label: Label,
        source_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let source_id = source_id.into();
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::PixelRange(source_id));
        }
        if let Some(m) = &mask {
            let (h, w, _) = pixels.dim();
            if m.dim() != (h, w) || m.iter().any(|&v| v > 1) {
                return Err(DataError::BadMask(source_id));
            }
        }
        Ok(ImageSample {
            pixels,
            mask,
            label,
            source_id,
        })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&Array2<u8>> {
        self.mask.as_ref()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered collection of samples sharing one resolution.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub split: Split,
    pub category: String,
    pub resolution: (usize, usize),
    samples: Vec<ImageSample>,
}

impl DatasetManifest {
    pub fn new(
        split: Split,
        category: impl Into<String>,
        samples: Vec<ImageSample>,
    ) -> Result<Self, DataError> {
        let category = category.into();
        let resolution = samples
            .first()
            .map(ImageSample::resolution)
            .unwrap_or((0, 0));
        for s in &samples {
            if s.resolution() != resolution {
                return Err(DataError::InvalidParameter(format!(
                    "sample {} has resolution {:?}, manifest expects {:?}",
                    s.source_id,
                    s.resolution(),
                    resolution
                )));
            }
        }
        Ok(DatasetManifest {
            split,
            category,
            resolution,
            samples,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn abnormal_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label.is_abnormal()).count()
    }
}

/// Anything that can hand out images by index; lets training iterate over
/// materialized manifests and lazily rendered factor grids alike.
pub trait ImageSource {
    fn count(&self) -> usize;
    fn image(&self, index: usize) -> Array3<f64>;
}

impl ImageSource for [ImageSample] {
    fn count(&self) -> usize {
        self.len()
    }

    fn image(&self, index: usize) -> Array3<f64> {
        self[index].pixels().clone()
    }
}

impl ImageSource for DatasetManifest {
    fn count(&self) -> usize {
        self.len()
    }

    fn image(&self, index: usize) -> Array3<f64> {
        self.samples[index].pixels().clone()
    }
}

impl ImageSource for [Array3<f64>] {
    fn count(&self) -> usize {
        self.len()
    }

    fn image(&self, index: usize) -> Array3<f64> {
        self[index].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_out_of_range_pixels() {
        let px = Array3::from_elem((2, 2, 1), 1.5);
        assert!(matches!(
            ImageSample::new(px, None, Label::Normal, "bad"),
            Err(DataError::PixelRange(_))
        ));
    }

    #[test]
    fn sample_rejects_mismatched_mask() {
        let px = Array3::zeros((4, 4, 1));
        let mask = Array2::zeros((3, 4));
        assert!(matches!(
            ImageSample::new(px, Some(mask), Label::Abnormal, "m"),
            Err(DataError::BadMask(_))
        ));
    }

    #[test]
    fn sample_rejects_nonbinary_mask() {
        let px = Array3::zeros((2, 2, 1));
        let mask = Array2::from_elem((2, 2), 3u8);
        assert!(ImageSample::new(px, Some(mask), Label::Abnormal, "m").is_err());
    }

    #[test]
    fn manifest_rejects_mixed_resolutions() {
        let a = ImageSample::new(Array3::zeros((2, 2, 1)), None, Label::Normal, "a").unwrap();
        let b = ImageSample::new(Array3::zeros((3, 3, 1)), None, Label::Normal, "b").unwrap();
        assert!(DatasetManifest::new(Split::Train, "x", vec![a, b]).is_err());
    }
}
