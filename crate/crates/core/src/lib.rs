//! Library for explaining convolutional variational autoencoders through
//! gradient attention.
//!
//! The pieces fit together as a pipeline:
//!
//! - [`data`] generates or loads image datasets (factor-grid shapes, defect
//!   textures, stroke digits, IDX files, MVTec-style folder trees).
//! - [`model`] defines small convolutional VAEs, their training loop, and
//!   portable checkpoints.
//! - [`attention`] turns latent-space gradients into spatial attention maps
//!   and scores anomalies from the posterior mean.
//! - [`eval`] converts maps into pixel-level localization metrics (ROC,
//!   AUROC, best IOU) against ground-truth masks.
//! - [`disentangle`] trains a FactorVAE variant whose attention maps are
//!   pushed apart by a differentiable overlap penalty, and measures
//!   disentanglement by majority-vote factor prediction.

pub mod attention;
pub mod data;
pub mod disentangle;
pub mod eval;
pub mod mapio;
pub mod model;
pub mod util;

pub use vaemap_autodiff as autodiff;

/// Version of this library, recorded in run manifests.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
