//! `vaemap demo`: the qualitative cross-digit panel. A VAE trained on one
//! digit class looks at a fresh sample of every digit; the grid's top row
//! shows the inputs and the bottom row the anomaly attention over them.

use std::path::PathBuf;

use ndarray::Array2;
use vaemap_core::attention::{anomaly_attention, fit_normal_stats, AnomalyMode, AnomalyOptions};
use vaemap_core::data::gen_digits_dataset;
use vaemap_core::mapio::save_gray_png;
use vaemap_core::model::train_vae;
use vaemap_core::util::{derive_seed, minmax_normalize};

use crate::config::{RunConfig, SourceKind};
use crate::dataset::load_train_test;
use crate::error::CliError;
use crate::manifest::RunContext;

/// White separator width between grid cells, in pixels.
const SEPARATOR: usize = 2;

pub fn run(config: RunConfig) -> Result<PathBuf, CliError> {
    let mut ctx = RunContext::create("demo", config)?;
    let seed = ctx.config.run.seed;

    if ctx.config.data.source != SourceKind::Digits {
        return Err(CliError::Config(
            "demo renders digit panels: set [data] source = \"digits\"".into(),
        ));
    }
    let (train, _test) = load_train_test(&ctx.config.data, None, seed)?;

    let vae = match &ctx.config.model.checkpoint {
        Some(_) => super::load_checkpoint(&mut ctx, "demo")?,
        None => {
            let res = ctx.config.data.resolution;
            let vae_config = ctx.config.model.vae_config(res, res, 1);
            let checkpoint = train_vae(
                &train,
                &vae_config,
                &ctx.config.model.train_opts(),
                derive_seed(seed, "train"),
            )?;
            let ckpt_path = ctx.out_file("model.ckpt");
            checkpoint.save(&ckpt_path)?;
            checkpoint.model
        }
    };

    let panel = gen_digits_dataset(
        1,
        ctx.config.data.resolution,
        derive_seed(seed, "demo-panel"),
    )?;
    let opts = AnomalyOptions {
        mode: ctx.config.attention.mode,
        layer: ctx.config.attention.layer_for(&vae.config),
        absolute_score: ctx.config.attention.absolute_score,
    };
    let stats = match opts.mode {
        AnomalyMode::NormalDiff => Some(fit_normal_stats(&vae, &train)?),
        AnomalyMode::SumMu => None,
    };

    let mut cells = Vec::with_capacity(panel.len());
    for sample in panel.samples() {
        let input = sample.pixels().index_axis(ndarray::Axis(2), 0).to_owned();
        let map = anomaly_attention(
            &vae,
            sample.pixels(),
            &opts,
            stats.as_ref(),
            derive_seed(seed, &sample.source_id),
        )?;
        cells.push((input, minmax_normalize(map.values())));
    }

    let grid = compose_grid(&cells);
    let grid_path = ctx.out_file("demo_grid.png");
    save_gray_png(&grid_path, &grid)?;

    ctx.finish()
}

/// Two rows of equally sized cells separated by thin white rules: inputs on
/// top, their attention maps below.
fn compose_grid(cells: &[(Array2<f64>, Array2<f64>)]) -> Array2<f64> {
    let (h, w) = cells[0].0.dim();
    let cols = cells.len();
    let grid_h = 2 * h + SEPARATOR;
    let grid_w = cols * w + (cols - 1) * SEPARATOR;
    let mut grid = Array2::from_elem((grid_h, grid_w), 1.0);
    for (col, (input, map)) in cells.iter().enumerate() {
        let x0 = col * (w + SEPARATOR);
        for y in 0..h {
            for x in 0..w {
                grid[(y, x0 + x)] = input[(y, x)];
                grid[(h + SEPARATOR + y, x0 + x)] = map[(y, x)];
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry_scales_with_the_cell_count() {
        let cell = Array2::zeros((4, 4));
        let cells: Vec<_> = (0..10).map(|_| (cell.clone(), cell.clone())).collect();
        let grid = compose_grid(&cells);
        assert_eq!(grid.dim(), (10, 10 * 4 + 9 * SEPARATOR));
        assert_eq!(grid[(4, 0)], 1.0);
        assert_eq!(grid[(0, 4)], 1.0);
        assert_eq!(grid[(0, 0)], 0.0);
    }
}
