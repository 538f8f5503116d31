//! `vaemap localize`: end-to-end pixel-level anomaly localization. Per
//! category the command trains (or loads) a one-class VAE, scores every test
//! pixel with the selected methods, and writes a CSV of AUROC and best-IOU
//! rows. Every score map is also dumped in exact binary form together with
//! its mask and a small meta file, so a later run can rebuild identical
//! metrics from the dumps alone.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use vaemap_core::attention::fit_normal_stats;
use vaemap_core::data::DatasetManifest;
use vaemap_core::eval::{
    method_maps, report_from_sets, write_report_csv, EvalOptions, LocalizationReport, MethodKind,
    ScoredPixelSet,
};
use vaemap_core::mapio::{load_mask, read_raw_map, save_gray_png, save_image_png, write_raw_map};
use vaemap_core::model::{train_vae, Vae};
use vaemap_core::util::{atomic_write, derive_seed, minmax_normalize};

use crate::config::{RunConfig, SourceKind};
use crate::dataset::{folder_categories, folder_root, load_train_test};
use crate::error::CliError;
use crate::manifest::RunContext;

/// Images per category that also get preview PNGs.
const PREVIEW_COUNT: usize = 4;

/// The pipeline switches a maps directory preserves for replay.
#[derive(Debug, Serialize, Deserialize)]
struct MapsMeta {
    layer: String,
    normalize_per_image: bool,
    iou_threshold_cap: Option<usize>,
    methods: Vec<String>,
    images: usize,
}

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("localize", config)?;
    let seed = ctx.config.run.seed;

    if let Some(maps_root) = ctx.config.eval.from_maps.clone() {
        return replay(ctx, &maps_root);
    }

    let categories: Vec<Option<String>> = match ctx.config.data.source {
        SourceKind::Folder => folder_categories(&ctx.config.data)?
            .into_iter()
            .map(Some)
            .collect(),
        SourceKind::Defect => vec![None],
        SourceKind::Digits | SourceKind::Shapes => {
            return Err(CliError::Config(
                "localize needs masked test data: use the folder or defect source".into(),
            ))
        }
    };
    if ctx.config.model.checkpoint.is_some() && categories.len() > 1 {
        return Err(CliError::Config(
            "one checkpoint cannot score multiple categories; set [data] category".into(),
        ));
    }

    let mut reports = Vec::with_capacity(categories.len());
    for cat in &categories {
        let (train, test) = load_train_test(&ctx.config.data, cat.as_deref(), seed)?;
        let category = test.category.clone();
        if ctx.config.data.source == SourceKind::Folder {
            let tree = folder_root(&ctx.config.data)?.join(&category);
            ctx.checksum_tree(&format!("dataset/{category}"), &tree)?;
        }

        let vae = match &ctx.config.model.checkpoint {
            Some(_) => super::load_checkpoint(&mut ctx, "localize")?,
            None => {
                let sample = &train.samples()[0];
                let (h, w) = sample.resolution();
                let vae_config = ctx.config.model.vae_config(h, w, sample.channels());
                train_vae(
                    &train,
                    &vae_config,
                    &ctx.config.model.train_opts(),
                    derive_seed(seed, &format!("train-{category}")),
                )?
                .model
            }
        };

        let opts = ctx.config.eval.eval_options(&ctx.config.attention, &vae.config);
        let stats = match opts.mode {
            vaemap_core::attention::AnomalyMode::NormalDiff => {
                Some(fit_normal_stats(&vae, &train)?)
            }
            vaemap_core::attention::AnomalyMode::SumMu => None,
        };
        let report = score_category(
            &mut ctx,
            &vae,
            &test,
            &opts,
            stats.as_ref(),
            derive_seed(seed, &format!("eval-{category}")),
        )?;
        reports.push(report);
    }

    let csv = ctx.out_file("report.csv");
    write_report_csv(&csv, &reports)?;
    ctx.finish()
}

/// Scores one category while dumping every raw map, mask, and the meta file
/// that makes the dump self-describing.
fn score_category(
    ctx: &mut RunContext,
    vae: &Vae,
    test: &DatasetManifest,
    opts: &EvalOptions,
    stats: Option<&vaemap_core::attention::NormalStats>,
    cat_seed: u64,
) -> Result<LocalizationReport, CliError> {
    let category = test.category.clone();
    let kinds = opts.method.kinds();
    let mut sets: Vec<(MethodKind, ScoredPixelSet)> =
        kinds.iter().map(|k| (*k, ScoredPixelSet::new())).collect();

    for (idx, sample) in test.samples().iter().enumerate() {
        let mask = sample
            .mask()
            .ok_or_else(|| CliError::Data(format!("{}: no ground-truth mask", sample.source_id)))?;
        let maps = method_maps(
            vae,
            sample.pixels(),
            opts,
            stats,
            derive_seed(cat_seed, &sample.source_id),
        )?;
        let mask_path = ctx.out_file(&format!("maps/{category}/{idx:04}_mask.png"));
        save_gray_png(&mask_path, &mask.mapv(f64::from))?;
        if idx < PREVIEW_COUNT {
            let input = ctx.out_file(&format!("previews/{category}/{idx:04}_input.png"));
            save_image_png(&input, sample.pixels())?;
        }
        for ((_, set), (kind, map)) in sets.iter_mut().zip(maps) {
            let raw = ctx.out_file(&format!("maps/{category}/{idx:04}_{}.raw", kind.as_str()));
            write_raw_map(&raw, &map.clone().into_dyn())?;
            if idx < PREVIEW_COUNT {
                let png = ctx.out_file(&format!(
                    "previews/{category}/{idx:04}_{}.png",
                    kind.as_str()
                ));
                save_gray_png(&png, &minmax_normalize(&map))?;
            }
            push_scored(set, map, mask, opts.normalize_per_image)?;
        }
    }

    let meta = MapsMeta {
        layer: opts.layer.clone(),
        normalize_per_image: opts.normalize_per_image,
        iou_threshold_cap: opts.iou_threshold_cap,
        methods: kinds.iter().map(|k| k.as_str().to_string()).collect(),
        images: test.len(),
    };
    let meta_path = ctx.out_file(&format!("maps/{category}/meta.json"));
    atomic_write(
        &meta_path,
        &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )?;

    Ok(report_from_sets(
        &category,
        &opts.layer,
        &sets,
        opts.iou_threshold_cap,
    )?)
}

fn push_scored(
    set: &mut ScoredPixelSet,
    map: Array2<f64>,
    mask: &Array2<u8>,
    normalize: bool,
) -> Result<(), CliError> {
    let scored = if normalize { minmax_normalize(&map) } else { map };
    set.push_map(&scored, mask)?;
    Ok(())
}

/// Rebuilds the report CSV from a previous run's dumps. Every switch that
/// affects the numbers comes from the stored meta files, so the metrics
/// reproduce the original run exactly.
fn replay(mut ctx: RunContext, maps_root: &Path) -> Result<PathBuf, CliError> {
    if !maps_root.is_dir() {
        return Err(CliError::Data(format!(
            "maps directory {} does not exist",
            maps_root.display()
        )));
    }
    ctx.checksum_tree("maps", maps_root)?;

    let mut categories: Vec<String> = std::fs::read_dir(maps_root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    categories.sort();
    if categories.is_empty() {
        return Err(CliError::Data(format!(
            "maps directory {} has no category subdirectories",
            maps_root.display()
        )));
    }

    let mut reports = Vec::with_capacity(categories.len());
    for category in &categories {
        let dir = maps_root.join(category);
        let meta: MapsMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)
            .map_err(|e| CliError::Data(format!("{}/meta.json: {e}", dir.display())))?;
        let kinds = meta
            .methods
            .iter()
            .map(|m| parse_method(m))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sets: Vec<(MethodKind, ScoredPixelSet)> =
            kinds.iter().map(|k| (*k, ScoredPixelSet::new())).collect();
        for idx in 0..meta.images {
            let mask = load_mask(&dir.join(format!("{idx:04}_mask.png")))?;
            for (kind, set) in kinds.iter().zip(sets.iter_mut()) {
                let raw = read_raw_map(&dir.join(format!("{idx:04}_{}.raw", kind.as_str())))?;
                let map: Array2<f64> = raw
                    .into_dimensionality()
                    .map_err(|e| CliError::Data(format!("map {idx:04} in {category}: {e}")))?;
                push_scored(&mut set.1, map, &mask, meta.normalize_per_image)?;
            }
        }
        reports.push(report_from_sets(
            category,
            &meta.layer,
            &sets,
            meta.iou_threshold_cap,
        )?);
    }

    let csv = ctx.out_file("report.csv");
    write_report_csv(&csv, &reports)?;
    ctx.finish()
}

fn parse_method(name: &str) -> Result<MethodKind, CliError> {
    match name {
        "attention" => Ok(MethodKind::Attention),
        "recon" => Ok(MethodKind::Recon),
        other => Err(CliError::Data(format!("unknown method {other} in meta.json"))),
    }
}
