//! `vaemap attend`: render per-dimension and aggregate attention maps for a
//! handful of images, as display PNGs plus raw dumps holding the exact
//! values behind each PNG.

use std::path::PathBuf;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaemap_core::attention::{aggregate_mean, attention_set, AttentionMap};
use vaemap_core::mapio::{save_gray_png, save_image_png, write_raw_map};
use vaemap_core::model::VaeConfig;
use vaemap_core::util::{derive_seed, minmax_normalize};

use crate::config::{RunConfig, SourceKind};
use crate::dataset::{load_train_test, shapes_dataset};
use crate::error::CliError;
use crate::manifest::RunContext;

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("attend", config)?;
    let seed = ctx.config.run.seed;
    let vae = super::load_checkpoint(&mut ctx, "attend")?;

    let images = pick_images(&ctx, seed)?;
    if images.is_empty() {
        return Err(CliError::Data("no test images to explain".into()));
    }
    let layer = ctx.config.attention.layer_for(&vae.config);
    let sampling = ctx.config.attention.sampling;

    for (i, image) in images.iter().enumerate() {
        let input_path = ctx.out_file(&format!("attend/img{i:03}_input.png"));
        save_image_png(&input_path, image)?;

        let map_seed = derive_seed(seed, &format!("attend-{i}"));
        let maps = attention_set(&vae, image, &layer, sampling, map_seed)?;
        let aggregate = aggregate_mean(&maps)?;
        for (d, map) in maps.iter().enumerate() {
            write_map_pair(&mut ctx, i, &format!("dim{d:02}"), map, &vae.config)?;
        }
        write_map_pair(&mut ctx, i, "aggregate", &aggregate, &vae.config)?;
    }

    ctx.finish()
}

/// A display map and its raw dump share one set of values: the map is
/// upsampled to input resolution and min-max normalized, then written both
/// ways, so decoding the PNG recovers the raw values up to 8-bit steps.
fn write_map_pair(
    ctx: &mut RunContext,
    image_index: usize,
    name: &str,
    map: &AttentionMap,
    config: &VaeConfig,
) -> Result<(), CliError> {
    let display = minmax_normalize(map.upsample(config.input_h, config.input_w).values());
    let png = ctx.out_file(&format!("attend/img{image_index:03}_{name}.png"));
    save_gray_png(&png, &display)?;
    let raw = ctx.out_file(&format!("attend/img{image_index:03}_{name}.raw"));
    write_raw_map(&raw, &display.into_dyn())?;
    Ok(())
}

/// The first `attention.images` test images of the configured source; the
/// shapes grid contributes a seeded random sample of ordinals instead.
fn pick_images(ctx: &RunContext, seed: u64) -> Result<Vec<Array3<f64>>, CliError> {
    let count = ctx.config.attention.images;
    match ctx.config.data.source {
        SourceKind::Shapes => {
            let ds = shapes_dataset(&ctx.config.data, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "attend-pick"));
            Ok((0..count)
                .map(|_| ds.image(rng.random_range(0..ds.spec.count())))
                .collect())
        }
        _ => {
            let (_train, test) = load_train_test(&ctx.config.data, None, seed)?;
            Ok(test
                .samples()
                .iter()
                .take(count)
                .map(|s| s.pixels().clone())
                .collect())
        }
    }
}
