//! Turns the `[data]` section into concrete datasets. Generated sources
//! derive their stream from the run seed, so the same config always yields
//! the same images.

use std::path::Path;

use vaemap_core::data::{
    gen_defect_dataset, gen_digits_dataset, gen_shapes_dataset, load_folder_dataset,
    DatasetManifest, FactorDataset, FolderOptions, ImageSample, Label, Split,
};
use vaemap_core::util::derive_seed;

use crate::config::{DataSection, SourceKind};
use crate::error::CliError;

/// Seed tag shared by every generated dataset.
fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, "data")
}

pub fn folder_options(data: &DataSection) -> FolderOptions {
    FolderOptions {
        channels: data.channels,
        resize: data.resize.map(|r| (r, r)),
        ..FolderOptions::default()
    }
}

/// The categories a folder run covers: the configured one, or every
/// subdirectory of the root.
pub fn folder_categories(data: &DataSection) -> Result<Vec<String>, CliError> {
    let root = folder_root(data)?;
    if let Some(category) = &data.category {
        return Ok(vec![category.clone()]);
    }
    if !root.is_dir() {
        return Err(CliError::Data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut out: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "dataset root {} has no category directories",
            root.display()
        )));
    }
    Ok(out)
}

pub fn folder_root(data: &DataSection) -> Result<&Path, CliError> {
    data.root
        .as_deref()
        .ok_or_else(|| CliError::Config("folder source needs [data] root".into()))
}

/// Loads or generates the (train, test) pair for sources that produce
/// image manifests. For the folder source, `category` selects the tree to
/// read; generated sources ignore it.
pub fn load_train_test(
    data: &DataSection,
    category: Option<&str>,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), CliError> {
    match data.source {
        SourceKind::Folder => {
            let root = folder_root(data)?;
            let category = category
                .map(str::to_string)
                .or_else(|| data.category.clone())
                .ok_or_else(|| CliError::Config("folder source needs [data] category".into()))?;
            if !root.join(&category).is_dir() {
                return Err(CliError::Data(format!(
                    "dataset path {} does not exist",
                    root.join(&category).display()
                )));
            }
            Ok(load_folder_dataset(root, &category, &folder_options(data))?)
        }
        SourceKind::Defect => Ok(gen_defect_dataset(
            data.n_normal,
            data.n_abnormal,
            data.resolution,
            data.defect,
            data_seed(seed),
        )?),
        SourceKind::Digits => digits_train_test(data, seed),
        SourceKind::Shapes => Err(CliError::Config(
            "the shapes source feeds distrain and dismetric, not image-manifest commands".into(),
        )),
    }
}

/// One-class digits protocol: the normal class becomes the training split,
/// and a fresh draw of every class becomes the test split.
fn digits_train_test(
    data: &DataSection,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), CliError> {
    let all = gen_digits_dataset(data.n_per_class, data.resolution, data_seed(seed))?;
    let train: Vec<ImageSample> = all
        .samples()
        .iter()
        .filter(|s| s.label == Label::Class(data.normal_digit))
        .map(|s| ImageSample::new(s.pixels().clone(), None, Label::Normal, s.source_id.clone()))
        .collect::<Result<_, _>>()?;
    if train.is_empty() {
        return Err(CliError::Config(format!(
            "normal_digit must be 0..=9, got {}",
            data.normal_digit
        )));
    }
    let test = gen_digits_dataset(
        data.n_per_class,
        data.resolution,
        derive_seed(data_seed(seed), "test"),
    )?;
    let test_samples: Vec<ImageSample> = test.samples().to_vec();
    Ok((
        DatasetManifest::new(Split::Train, &format!("digit-{}", data.normal_digit), train)?,
        DatasetManifest::new(Split::Test, "digits", test_samples)?,
    ))
}

pub fn shapes_dataset(data: &DataSection, seed: u64) -> Result<FactorDataset, CliError> {
    Ok(gen_shapes_dataset(
        &data.cardinalities,
        data.resolution,
        data_seed(seed),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSection;

    #[test]
    fn defect_source_is_reproducible_from_the_seed() {
        let data = DataSection {
            n_normal: 3,
            n_abnormal: 2,
            resolution: 32,
            ..DataSection::default()
        };
        let (train_a, test_a) = load_train_test(&data, None, 7).unwrap();
        let (train_b, test_b) = load_train_test(&data, None, 7).unwrap();
        assert_eq!(train_a.len(), 3);
        assert_eq!(test_a.len(), 2);
        for (a, b) in train_a.samples().iter().zip(train_b.samples()) {
            assert_eq!(a.pixels(), b.pixels());
        }
        for (a, b) in test_a.samples().iter().zip(test_b.samples()) {
            assert_eq!(a.pixels(), b.pixels());
        }
    }

    #[test]
    fn digits_source_builds_a_one_class_training_split() {
        let data = DataSection {
            source: SourceKind::Digits,
            n_per_class: 2,
            resolution: 16,
            normal_digit: 3,
            ..DataSection::default()
        };
        let (train, test) = load_train_test(&data, None, 5).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train.abnormal_count(), 0);
        assert!(train.samples().iter().all(|s| s.label == Label::Normal));
        assert_eq!(test.len(), 20);
        let train_pixels = train.samples()[0].pixels();
        assert!(
            test.samples()
                .iter()
                .all(|s| s.pixels() != train_pixels),
            "test split must be a fresh draw"
        );
    }

    #[test]
    fn missing_folder_root_is_a_data_error() {
        let data = DataSection {
            source: SourceKind::Folder,
            root: Some("/nonexistent/path".into()),
            category: Some("widget".into()),
            ..DataSection::default()
        };
        let err = load_train_test(&data, None, 0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn folder_without_root_is_a_config_error() {
        let data = DataSection {
            source: SourceKind::Folder,
            ..DataSection::default()
        };
        let err = load_train_test(&data, None, 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
