//! `vaemap gen-data`: materialize a synthetic dataset on disk. The defect
//! source exports the full folder tree (train/good, test splits, masks), so
//! downstream runs can consume it through the folder loader like any real
//! dataset.

use std::path::PathBuf;

use vaemap_core::data::export_folder_dataset;
use vaemap_core::mapio::save_image_png;

use crate::config::{RunConfig, SourceKind};
use crate::dataset::{load_train_test, shapes_dataset};
use crate::error::CliError;
use crate::manifest::{walk_files, RunContext};

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("gen-data", config)?;
    let seed = ctx.config.run.seed;
    let root = ctx.dir().join("dataset");

    match ctx.config.data.source {
        SourceKind::Defect => {
            let (train, test) = load_train_test(&ctx.config.data, None, seed)?;
            let category = ctx
                .config
                .data
                .category
                .clone()
                .unwrap_or_else(|| train.category.clone());
            export_folder_dataset(&train, &test, &root, &category)?;
        }
        SourceKind::Digits => {
            let (train, test) = load_train_test(&ctx.config.data, None, seed)?;
            for (split, manifest) in [("train", &train), ("test", &test)] {
                for (i, sample) in manifest.samples().iter().enumerate() {
                    save_image_png(
                        &root.join("digits").join(split).join(format!("{i:04}.png")),
                        sample.pixels(),
                    )?;
                }
            }
        }
        SourceKind::Shapes => {
            let ds = shapes_dataset(&ctx.config.data, seed)?;
            let total = ds.spec.count();
            let count = ctx.config.data.export_count.min(total);
            if count == 0 {
                return Err(CliError::Config("export_count must be at least 1".into()));
            }
            // Evenly spaced ordinals cover every factor's range.
            for k in 0..count {
                let ordinal = k * total / count;
                save_image_png(
                    &root.join("shapes").join(format!("{ordinal:06}.png")),
                    &ds.image(ordinal),
                )?;
            }
        }
        SourceKind::Folder => {
            return Err(CliError::Config(
                "gen-data writes generated sources; the folder source is already on disk".into(),
            ))
        }
    }

    for path in walk_files(&root)? {
        let rel = path
            .strip_prefix(ctx.dir())
            .unwrap_or(&path)
            .display()
            .to_string();
        ctx.out_file(&rel);
    }
    ctx.finish()
}
