//! Seeding, array resizing, normalization, and file helpers shared across
//! modules.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

/// Derives an independent stream seed from a root seed and a component tag.
///
/// All randomness in a run funnels through one root seed; each consumer asks
/// for its own stream by name so that adding a consumer never shifts the
/// draws of another.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(root ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Rescales a map to [0,1] by its own min and max. A constant map becomes
/// all zeros.
pub fn minmax_normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() || max <= min {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

/// Bilinear resize with half-pixel centers, the convention where resizing to
/// the source size is the identity.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    assert!(out_h > 0 && out_w > 0, "resize target must be nonempty");
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[(y0, x0)] * (1.0 - dy) * (1.0 - dx)
            + src[(y0, x1)] * (1.0 - dy) * dx
            + src[(y1, x0)] * dy * (1.0 - dx)
            + src[(y1, x1)] * dy * dx
    })
}

/// Nearest-neighbor resize; preserves the value set, so binary stays binary.
pub fn resize_nearest(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    assert!(out_h > 0 && out_w > 0, "resize target must be nonempty");
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[(y, x)]
    })
}

/// Resizes each channel of an H×W×C image independently.
pub fn resize_channels(
    src: &Array3<f64>,
    out_h: usize,
    out_w: usize,
    nearest: bool,
) -> Array3<f64> {
    let (_, _, c) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(2), ch).to_owned();
        let resized = if nearest {
            resize_nearest(&plane, out_h, out_w)
        } else {
            resize_bilinear(&plane, out_h, out_w)
        };
        out.index_axis_mut(ndarray::Axis(2), ch).assign(&resized);
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a file via a temporary sibling and rename, so readers never observe
/// a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
