//! Image and raw-map file formats: 8-bit PNG heatmaps for inspection and a
//! self-describing binary dump that preserves exact values for downstream
//! evaluation.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

use crate::util::atomic_write;

const RAW_MAGIC: &[u8; 8] = b"VMRAWMAP";
const RAW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

fn format_err(path: &Path, reason: impl Into<String>) -> MapIoError {
    MapIoError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Saves values in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, values: &Array2<f64>) -> Result<(), MapIoError> {
    let (h, w) = values.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), v) in values.indexed_iter() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([byte]));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Saves an H×W×C image with C ∈ {1,3} and values in [0,1] as PNG.
pub fn save_image_png(path: &Path, pixels: &Array3<f64>) -> Result<(), MapIoError> {
    let (h, w, c) = pixels.dim();
    match c {
        1 => save_gray_png(path, &pixels.index_axis(ndarray::Axis(2), 0).to_owned()),
        3 => {
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2]
                        .map(|ch| (pixels[(y, x, ch)].clamp(0.0, 1.0) * 255.0).round() as u8);
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            img.save(path)?;
            Ok(())
        }
        _ => Err(format_err(path, format!("unsupported channel count {c}"))),
    }
}

/// Loads an image file to H×W×C with values in [0,1]. `channels` must be 1
/// (luma) or 3 (RGB); sources with other layouts are converted.
pub fn load_image(path: &Path, channels: usize) -> Result<Array3<f64>, MapIoError> {
    let img = image::open(path)?;
    match channels {
        1 => {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 1),
                |(y, x, _)| f64::from(gray.get_pixel(x as u32, y as u32)[0]) / 255.0,
            ))
        }
        3 => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 3),
                |(y, x, c)| f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0,
            ))
        }
        _ => Err(format_err(path, format!("unsupported channel count {channels}"))),
    }
}

/// Loads a mask image: any pixel above half intensity counts as positive.
pub fn load_mask(path: &Path) -> Result<Array2<u8>, MapIoError> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32)[0] > 127)
    }))
}

/// Writes exact f64 values: magic, version, rank, dims, then row-major
/// little-endian payload.
pub fn write_raw_map(path: &Path, values: &ArrayD<f64>) -> Result<(), MapIoError> {
    let mut bytes = Vec::with_capacity(24 + values.len() * 8);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&RAW_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(values.ndim() as u64).to_le_bytes());
    for d in values.shape() {
        bytes.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_raw_map(path: &Path) -> Result<ArrayD<f64>, MapIoError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], MapIoError> {
        let end = *cursor + n;
        let slice = bytes
            .get(*cursor..end)
            .ok_or_else(|| format_err(path, "truncated raw map"))?;
        *cursor = end;
        Ok(slice)
    };
    if take(&mut cursor, 8)? != RAW_MAGIC {
        return Err(format_err(path, "bad magic, not a raw map file"));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != RAW_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let ndim = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    if ndim > 8 {
        return Err(format_err(path, format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| format_err(path, format!("shape error: {e}")))
}
