//! Error classification for the process exit code: 2 for configuration
//! problems the user can fix by editing the config or flags, 3 for missing
//! or malformed data, 4 when training stops being finite.

use thiserror::Error;
use vaemap_core::attention::AttentionError;
use vaemap_core::data::DataError;
use vaemap_core::disentangle::DisentangleError;
use vaemap_core::eval::EvalError;
use vaemap_core::mapio::MapIoError;
use vaemap_core::model::ModelError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CliError::Divergence(e.to_string()),
            ModelError::InvalidConfig(_)
            | ModelError::ResolutionMismatch { .. }
            | ModelError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidParameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Model(m) => m.into(),
            AttentionError::UnknownLayer(_)
            | AttentionError::LatentIndexOutOfRange { .. }
            | AttentionError::MissingStats => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Attention(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DisentangleError> for CliError {
    fn from(e: DisentangleError) -> Self {
        match e {
            DisentangleError::Model(m) => m.into(),
            DisentangleError::Attention(a) => a.into(),
            DisentangleError::Data(d) => d.into(),
            DisentangleError::BadLambda(_)
            | DisentangleError::BadFixedPair(..)
            | DisentangleError::TooFewDims(_)
            | DisentangleError::BatchTooSmall(_)
            | DisentangleError::InvalidParameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MapIoError> for CliError {
    fn from(e: MapIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Divergence("x".into()).exit_code(), 4);
    }

    #[test]
    fn divergence_is_recognized_through_nested_errors() {
        let ckpt = {
            let config = vaemap_core::model::VaeConfig::tiny();
            let model = vaemap_core::model::Vae::init(config, 0).unwrap();
            vaemap_core::model::Checkpoint {
                model,
                meta: vaemap_core::model::TrainMeta {
                    epochs: 0,
                    seed: 0,
                    loss_curve: vec![],
                },
            }
        };
        let inner = ModelError::Diverged {
            step: 3,
            last_good: Box::new(ckpt),
        };
        let outer: CliError = DisentangleError::Model(inner).into();
        assert_eq!(outer.exit_code(), 4);
    }

    #[test]
    fn unknown_layer_is_a_config_error() {
        let e: CliError = AttentionError::UnknownLayer("conv9".into()).into();
        assert_eq!(e.exit_code(), 2);
    }
}
