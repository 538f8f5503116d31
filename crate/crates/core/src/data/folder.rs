//! Folder-tree dataset loader for the MVTec-AD layout:
//! `root/<category>/train/good/*`, `root/<category>/test/<defect-type>/*`,
//! `root/<category>/ground_truth/<defect-type>/*`. Ground-truth masks pair
//! with test images by filename stem.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{DataError, DatasetManifest, ImageSample, Label, Split};
use crate::mapio::{load_image, load_mask, save_gray_png, save_image_png};
use crate::util::{resize_channels, resize_nearest};

#[derive(Clone, Debug)]
pub struct FolderOptions {
    /// Channels to decode to: 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Target (H, W); images are resized bilinearly, masks nearest-neighbor.
    pub resize: Option<(usize, usize)>,
    /// Suffix appended to a test image's stem when looking for its mask.
    pub mask_suffix: String,
}

impl Default for FolderOptions {
    fn default() -> Self {
        FolderOptions {
            channels: 1,
            resize: None,
            mask_suffix: "_mask".into(),
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Directory entries sorted by name, so loading order never depends on the
/// filesystem's enumeration order.
fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::Format {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_folder_dataset(
    root: &Path,
    category: &str,
    opts: &FolderOptions,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let cat = root.join(category);

    let mut train = Vec::new();
    for path in sorted_entries(&cat.join("train").join("good"))? {
        if !is_image(&path) {
            continue;
        }
        let pixels = prepare_pixels(&path, opts)?;
        train.push(ImageSample::new(
            pixels,
            None,
            Label::Normal,
            rel_id(&path, &cat),
        )?);
    }

    let mut test = Vec::new();
    for defect_dir in sorted_entries(&cat.join("test"))? {
        if !defect_dir.is_dir() {
            continue;
        }
        let defect_name = defect_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let is_good = defect_name == "good";
        for path in sorted_entries(&defect_dir)? {
            if !is_image(&path) {
                continue;
            }
            let pixels = prepare_pixels(&path, opts)?;
            let (h, w, _) = pixels.dim();
            let mask = if is_good {
                Array2::zeros((h, w))
            } else {
                let mask_dir = cat.join("ground_truth").join(&defect_name);
                let raw = find_mask(&mask_dir, &path, &opts.mask_suffix)?;
                resize_mask(&raw, h, w)
            };
            let label = if is_good { Label::Normal } else { Label::Abnormal };
            test.push(ImageSample::new(pixels, Some(mask), label, rel_id(&path, &cat))?);
        }
    }

    Ok((
        DatasetManifest::new(Split::Train, category, train)?,
        DatasetManifest::new(Split::Test, category, test)?,
    ))
}

fn rel_id(path: &Path, cat: &Path) -> String {
    path.strip_prefix(cat)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn prepare_pixels(path: &Path, opts: &FolderOptions) -> Result<ndarray::Array3<f64>, DataError> {
    let pixels = load_image(path, opts.channels)?;
    Ok(match opts.resize {
        Some((h, w)) => resize_channels(&pixels, h, w, false),
        None => pixels,
    })
}

/// Locates the mask for a test image: `<stem><suffix>.png`, then `<stem>.png`,
/// then any file sharing the stem prefix.
fn find_mask(mask_dir: &Path, image: &Path, suffix: &str) -> Result<Array2<u8>, DataError> {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let exact = mask_dir.join(format!("{stem}{suffix}.png"));
    if exact.is_file() {
        return Ok(load_mask(&exact)?);
    }
    let bare = mask_dir.join(format!("{stem}.png"));
    if bare.is_file() {
        return Ok(load_mask(&bare)?);
    }
    if let Ok(entries) = sorted_entries(mask_dir) {
        for candidate in entries {
            let name = candidate
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            if name.starts_with(stem) && is_image(&candidate) {
                return Ok(load_mask(&candidate)?);
            }
        }
    }
    Err(DataError::MissingMask(image.display().to_string()))
}

fn resize_mask(mask: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    if mask.dim() == (h, w) {
        return mask.clone();
    }
    let float = mask.mapv(f64::from);
    resize_nearest(&float, h, w).mapv(|v| v as u8)
}

/// Writes manifests back out in the same folder layout (8-bit PNGs), so a
/// generated dataset can be inspected or re-loaded through the folder path.
pub fn export_folder_dataset(
    train: &DatasetManifest,
    test: &DatasetManifest,
    root: &Path,
    category: &str,
) -> Result<(), DataError> {
    let cat = root.join(category);
    for (i, s) in train.samples().iter().enumerate() {
        save_image_png(&cat.join("train/good").join(format!("{i:03}.png")), s.pixels())?;
    }
    for (i, s) in test.samples().iter().enumerate() {
        let defect_name = if s.label.is_abnormal() { "defect" } else { "good" };
        save_image_png(
            &cat.join("test").join(defect_name).join(format!("{i:03}.png")),
            s.pixels(),
        )?;
        if s.label.is_abnormal() {
            let mask = s
                .mask()
                .ok_or_else(|| DataError::MissingMask(s.source_id.clone()))?;
            save_gray_png(
                &cat.join("ground_truth")
                    .join(defect_name)
                    .join(format!("{i:03}_mask.png")),
                &mask.mapv(f64::from),
            )?;
        }
    }
    // Loaders expect the good test directory to exist even when empty.
    std::fs::create_dir_all(cat.join("test/good"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_defect_dataset, DefectKind};

    fn exported_tree() -> (tempfile::TempDir, DatasetManifest, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = gen_defect_dataset(4, 3, 32, DefectKind::Blob, 11).unwrap();
        export_folder_dataset(&train, &test, dir.path(), "widget").unwrap();
        (dir, train, test)
    }

    #[test]
    fn export_then_load_pairs_every_defect_with_a_mask() {
        let (dir, train, test) = exported_tree();
        let (ltrain, ltest) =
            load_folder_dataset(dir.path(), "widget", &FolderOptions::default()).unwrap();
        assert_eq!(ltrain.len(), train.len());
        assert_eq!(ltest.len(), test.len());
        assert_eq!(ltrain.abnormal_count(), 0);
        for s in ltest.samples() {
            let mask = s.mask().expect("every test sample carries a mask");
            if s.label.is_abnormal() {
                assert!(mask.iter().any(|&m| m == 1), "{}: empty mask", s.source_id);
            } else {
                assert!(mask.iter().all(|&m| m == 0));
            }
        }
    }

    #[test]
    fn loaded_pixels_match_up_to_quantization() {
        let (dir, train, _) = exported_tree();
        let (ltrain, _) =
            load_folder_dataset(dir.path(), "widget", &FolderOptions::default()).unwrap();
        for (orig, loaded) in train.samples().iter().zip(ltrain.samples()) {
            for (a, b) in orig.pixels().iter().zip(loaded.pixels()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_mask_is_reported_with_the_offending_file() {
        let (dir, _, _) = exported_tree();
        let gt = dir.path().join("widget/ground_truth/defect");
        let victim = sorted_entries(&gt).unwrap().into_iter().next().unwrap();
        std::fs::remove_file(&victim).unwrap();
        let err = load_folder_dataset(dir.path(), "widget", &FolderOptions::default());
        match err {
            Err(DataError::MissingMask(name)) => {
                assert!(name.contains("000"), "unexpected file in error: {name}")
            }
            other => panic!("expected MissingMask, got {other:?}"),
        }
    }

    #[test]
    fn resize_option_rescales_images_and_keeps_masks_binary() {
        let (dir, _, _) = exported_tree();
        let opts = FolderOptions {
            resize: Some((16, 16)),
            ..FolderOptions::default()
        };
        let (ltrain, ltest) = load_folder_dataset(dir.path(), "widget", &opts).unwrap();
        assert_eq!(ltrain.resolution, (16, 16));
        for s in ltest.samples() {
            assert_eq!(s.mask().unwrap().dim(), (16, 16));
            assert!(s.mask().unwrap().iter().all(|&m| m <= 1));
        }
    }
}
