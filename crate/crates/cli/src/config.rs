//! Run configuration: a TOML file with one section per pipeline stage,
//! overridden by command-line flags. Unknown keys are rejected so a typo
//! never silently falls back to a default, and the fully resolved config is
//! what every run snapshots to disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vaemap_core::attention::{AnomalyMode, Sampling};
use vaemap_core::data::DefectKind;
use vaemap_core::disentangle::{AdConfig, AdTrainOpts, MapNormalization, MetricOpts, PairSelection};
use vaemap_core::eval::{EvalOptions, MethodSelect};
use vaemap_core::model::{ConvSpec, TrainOpts, VaeConfig};

use crate::error::CliError;

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub layer: Option<String>,
    pub mode: Option<AnomalyMode>,
    pub sampling: Option<Sampling>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub attention: AttentionSection,
    pub eval: EvalSection,
    pub disentangle: DisentangleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Root seed; every random stream in the run derives from it.
    pub seed: u64,
    /// Run directory; all outputs land under it.
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, out: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// MVTec-style folder tree on disk.
    Folder,
    /// Generated defect textures with exact masks.
    Defect,
    /// Generated stroke digits.
    Digits,
    /// Factor-grid shapes for disentanglement work.
    Shapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: SourceKind,
    /// Folder source: dataset root directory.
    pub root: Option<PathBuf>,
    /// Folder source: category subdirectory. Empty means every
    /// subdirectory of the root.
    pub category: Option<String>,
    /// Channels to decode folder images to (1 or 3).
    pub channels: usize,
    /// Square resize applied to folder images.
    pub resize: Option<usize>,
    /// Defect source: training and test counts.
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Generated image resolution (defect, digits, shapes).
    pub resolution: usize,
    pub defect: DefectKind,
    /// Digits source: samples per class.
    pub n_per_class: usize,
    /// Digits source: the class treated as normal for one-class training.
    pub normal_digit: u8,
    /// Shapes source: factor cardinalities.
    pub cardinalities: Vec<usize>,
    /// Image count for flat exports of the shapes grid.
    pub export_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: SourceKind::Defect,
            root: None,
            category: None,
            channels: 1,
            resize: None,
            n_normal: 100,
            n_abnormal: 20,
            resolution: 64,
            defect: DefectKind::Blob,
            n_per_class: 50,
            normal_digit: 1,
            cardinalities: vec![3, 6, 40, 32, 32],
            export_count: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Small,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub preset: ModelPreset,
    /// Encoder channel widths; empty keeps the preset's stages.
    pub stages: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the KL term.
    pub beta: f64,
    /// Optional cap on optimizer steps across epochs.
    pub max_steps: Option<usize>,
    /// Saved model consumed by commands that do not train one.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 8,
            preset: ModelPreset::Small,
            stages: vec![],
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            beta: 1.0,
            max_steps: None,
            checkpoint: None,
        }
    }
}

impl ModelSection {
    pub fn vae_config(&self, h: usize, w: usize, c: usize) -> VaeConfig {
        let mut cfg = match self.preset {
            ModelPreset::Small => VaeConfig::small(h, w, c, self.latent_dim),
            ModelPreset::Residual => VaeConfig::residual(h, w, c, self.latent_dim),
        };
        if !self.stages.is_empty() {
            let residual = usize::from(self.preset == ModelPreset::Residual);
            cfg.encoder = self
                .stages
                .iter()
                .map(|&ch| ConvSpec {
                    residual_blocks: residual,
                    ..ConvSpec::new(ch)
                })
                .collect();
            cfg.tap_layers = cfg.stage_names();
        }
        cfg
    }

    pub fn train_opts(&self) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta: self.beta,
            augment: None,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    /// Encoder tap to read maps from; defaults to the middle stage.
    pub layer: Option<String>,
    pub mode: AnomalyMode,
    pub sampling: Sampling,
    /// Score anomalies with |s| instead of the signed sum.
    pub absolute_score: bool,
    /// How many test images the attend command renders.
    pub images: usize,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            layer: None,
            mode: AnomalyMode::SumMu,
            sampling: Sampling::Mu,
            absolute_score: false,
            images: 4,
        }
    }
}

impl AttentionSection {
    /// The configured layer, or the model's default tap.
    pub fn layer_for(&self, config: &VaeConfig) -> String {
        self.layer
            .clone()
            .unwrap_or_else(|| vaemap_core::attention::default_layer(config))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub method: MethodSelect,
    /// Min-max normalize each image's map before pooling.
    pub normalize_per_image: bool,
    /// Optional quantile cap on the IOU threshold sweep.
    pub iou_threshold_cap: Option<usize>,
    /// Re-score saved raw maps from this directory instead of running the
    /// model.
    pub from_maps: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            method: MethodSelect::Both,
            normalize_per_image: true,
            iou_threshold_cap: None,
            from_maps: None,
        }
    }
}

impl EvalSection {
    pub fn eval_options(&self, attention: &AttentionSection, config: &VaeConfig) -> EvalOptions {
        EvalOptions {
            method: self.method,
            layer: attention.layer_for(config),
            mode: attention.mode,
            absolute_score: attention.absolute_score,
            normalize_per_image: self.normalize_per_image,
            iou_threshold_cap: self.iou_threshold_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisentangleSection {
    /// Weight of the attention-overlap penalty; 0 is the plain baseline.
    pub lambda: f64,
    /// Weight of the total-correlation term.
    pub gamma: f64,
    pub pair_selection: PairSelection,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub disc_hidden: Vec<usize>,
    /// Train on a fixed random subset of the factor grid.
    pub subset: Option<usize>,
    pub eval_every: usize,
    pub n_votes: usize,
    pub batch_per_vote: usize,
    pub std_sample: usize,
    pub eval_images: usize,
}

impl Default for DisentangleSection {
    fn default() -> Self {
        DisentangleSection {
            lambda: 1.0,
            gamma: 10.0,
            pair_selection: PairSelection::Top2Response,
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            disc_lr: 1e-4,
            disc_hidden: vec![64, 64],
            subset: None,
            eval_every: 500,
            n_votes: 500,
            batch_per_vote: 32,
            std_sample: 1024,
            eval_images: 8,
        }
    }
}

impl DisentangleSection {
    pub fn ad_config(&self, attention: &AttentionSection) -> AdConfig {
        AdConfig {
            lambda: self.lambda,
            pair_selection: self.pair_selection,
            attention_layer: attention.layer.clone(),
            normalization: MapNormalization::None,
        }
    }

    pub fn metric_opts(&self) -> MetricOpts {
        MetricOpts {
            n_votes: self.n_votes,
            batch_per_vote: self.batch_per_vote,
            std_sample: self.std_sample,
        }
    }

    pub fn train_opts(&self) -> AdTrainOpts {
        AdTrainOpts {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            disc_lr: self.disc_lr,
            gamma: self.gamma,
            disc_hidden: self.disc_hidden.clone(),
            subset: self.subset,
            eval_every: self.eval_every,
            metric: self.metric_opts(),
            eval_images: self.eval_images,
        }
    }
}

impl RunConfig {
    /// Parses the config file (or starts from defaults), then applies flag
    /// overrides. A run directory must come from one of the two.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        if config.run.out.is_none() {
            return Err(CliError::Config(
                "no run directory: set [run] out or pass --out".into(),
            ));
        }
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.run.seed = seed;
        }
        if let Some(layer) = &overrides.layer {
            self.attention.layer = Some(layer.clone());
        }
        if let Some(mode) = overrides.mode {
            self.attention.mode = mode;
        }
        if let Some(sampling) = overrides.sampling {
            self.attention.sampling = sampling;
        }
        if let Some(lambda) = overrides.lambda {
            self.disentangle.lambda = lambda;
        }
        if let Some(gamma) = overrides.gamma {
            self.disentangle.gamma = gamma;
        }
        if let Some(out) = &overrides.out {
            self.run.out = Some(out.clone());
        }
    }

    /// The run directory, guaranteed present after [`load`](Self::load).
    pub fn out_dir(&self) -> &Path {
        self.run
            .out
            .as_deref()
            .expect("load() rejects configs without a run directory")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let mut config = RunConfig::default();
        config.run.out = Some(PathBuf::from("runs/x"));
        let text = config.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn fixed_pair_selection_roundtrips() {
        let mut config = RunConfig::default();
        config.run.out = Some(PathBuf::from("runs/x"));
        config.disentangle.pair_selection = PairSelection::Fixed(0, 3);
        let back: RunConfig = toml::from_str(&config.to_toml()).unwrap();
        assert_eq!(back.disentangle.pair_selection, PairSelection::Fixed(0, 3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[run]\nseed = 3\nout = \"r\"\n\n[model]\nlatent_dmi = 4\n",
        );
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("latent_dmi"), "{err}");
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nout = \"r\"\n\n[modle]\nepochs = 2\n");
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[run]\nseed = 3\nout = \"from-file\"\n\n[attention]\nlayer = \"conv1\"\nmode = \"sum-mu\"\n\n[disentangle]\nlambda = 0.5\n",
        );
        let overrides = Overrides {
            seed: Some(9),
            layer: Some("conv2".into()),
            mode: Some(AnomalyMode::NormalDiff),
            sampling: Some(Sampling::Z),
            lambda: Some(2.0),
            gamma: Some(0.0),
            out: Some(PathBuf::from("from-flag")),
        };
        let config = RunConfig::load(Some(&path), &overrides).unwrap();
        assert_eq!(config.run.seed, 9);
        assert_eq!(config.attention.layer.as_deref(), Some("conv2"));
        assert_eq!(config.attention.mode, AnomalyMode::NormalDiff);
        assert_eq!(config.attention.sampling, Sampling::Z);
        assert_eq!(config.disentangle.lambda, 2.0);
        assert_eq!(config.disentangle.gamma, 0.0);
        assert_eq!(config.out_dir(), Path::new("from-flag"));
    }

    #[test]
    fn missing_run_directory_is_a_config_error() {
        let err = RunConfig::load(None, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn custom_stages_reshape_the_encoder() {
        let section = ModelSection {
            stages: vec![8, 16],
            latent_dim: 4,
            ..ModelSection::default()
        };
        let cfg = section.vae_config(32, 32, 1);
        assert_eq!(cfg.encoder.len(), 2);
        assert_eq!(cfg.encoder[0].out_channels, 8);
        assert_eq!(cfg.encoder[1].out_channels, 16);
        assert_eq!(cfg.tap_layers, vec!["conv1", "conv2"]);
        cfg.validate().unwrap();
    }
}
