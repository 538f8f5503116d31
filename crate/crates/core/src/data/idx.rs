//! IDX byte-format reader and writer (the MNIST container format:
//! big-endian sizes behind magic 0x00000803 for image tensors and
//! 0x00000801 for label vectors).

use std::path::Path;

use ndarray::Array3;

use super::{DataError, DatasetManifest, ImageSample, Label, Split};
use crate::util::atomic_write;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format_err(self.path, "truncated file"))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads an IDX image file and its parallel label file into a manifest with
/// pixels scaled to [0,1] and labels carried as class ids.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<DatasetManifest, DataError> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let mut r = Reader {
        bytes: &image_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = r.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?;
    if r.pos != image_bytes.len() {
        return Err(format_err(images_path, "trailing bytes after payload"));
    }

    let mut lr = Reader {
        bytes: &label_bytes,
        pos: 0,
        path: labels_path,
    };
    let lmagic = lr.u32_be()?;
    if lmagic != LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = lr.u32_be()? as usize;
    if ln != n {
        return Err(format_err(
            labels_path,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    let labels = lr.take(n)?;

    let samples = (0..n)
        .map(|i| {
            let offset = i * rows * cols;
            let img = Array3::from_shape_fn((rows, cols, 1), |(y, x, _)| {
                f64::from(pixels[offset + y * cols + x]) / 255.0
            });
            ImageSample::new(img, None, Label::Class(labels[i]), format!("idx-{i:05}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    DatasetManifest::new(Split::Train, "idx", samples)
}

/// Writes images as an IDX ubyte tensor; values in [0,1] are quantized to
/// bytes by rounding.
pub fn write_idx_images(path: &Path, images: &[Array3<f64>]) -> Result<(), DataError> {
    let (rows, cols) = images
        .first()
        .map(|im| (im.dim().0, im.dim().1))
        .unwrap_or((0, 0));
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        let (h, w, c) = im.dim();
        if (h, w) != (rows, cols) || c != 1 {
            return Err(DataError::InvalidParameter(
                "all exported images must be single-channel and equally sized".into(),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                bytes.push((im[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    atomic_write(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_preserves_counts_labels_and_extremes() {
        let dir = tmp();
        let images = vec![
            Array3::from_elem((4, 3, 1), 1.0),
            Array3::from_elem((4, 3, 1), 0.0),
        ];
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        write_idx_images(&ipath, &images).unwrap();
        write_idx_labels(&lpath, &[7, 1]).unwrap();
        let ds = load_idx_images(&ipath, &lpath).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.resolution, (4, 3));
        assert_eq!(ds.samples()[0].label, Label::Class(7));
        assert_eq!(ds.samples()[0].pixels()[(0, 0, 0)], 1.0, "byte 255 is pixel 1.0");
        assert_eq!(ds.samples()[1].pixels()[(0, 0, 0)], 0.0);
    }

    #[test]
    fn empty_payload_gives_empty_manifest() {
        let dir = tmp();
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        write_idx_images(&ipath, &[]).unwrap();
        write_idx_labels(&lpath, &[]).unwrap();
        let ds = load_idx_images(&ipath, &lpath).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tmp();
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        std::fs::write(&ipath, 0x0000_0801u32.to_be_bytes()).unwrap();
        write_idx_labels(&lpath, &[]).unwrap();
        assert!(matches!(
            load_idx_images(&ipath, &lpath),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tmp();
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 10]);
        std::fs::write(&ipath, &bytes).unwrap();
        write_idx_labels(&lpath, &[0, 1]).unwrap();
        assert!(matches!(
            load_idx_images(&ipath, &lpath),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tmp();
        let ipath = dir.path().join("imgs.idx");
        let lpath = dir.path().join("labels.idx");
        write_idx_images(&ipath, &[Array3::zeros((2, 2, 1))]).unwrap();
        write_idx_labels(&lpath, &[1, 2]).unwrap();
        assert!(load_idx_images(&ipath, &lpath).is_err());
    }
}
