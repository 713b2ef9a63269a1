use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the translation, metric and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite activation in image {image} (filter {filter})")]
    NonFiniteActivation { image: usize, filter: usize },

    #[error("empty sample set: {0}")]
    EmptySamples(&'static str),

    #[error("non-finite sample value in {0}")]
    NonFiniteSample(&'static str),

    #[error("filter count mismatch: {left} vs {right}")]
    FilterMismatch { left: usize, right: usize },

    #[error("layer mismatch: expected `{expected}`, got `{actual}`")]
    LayerMismatch { expected: String, actual: String },

    #[error("unknown layer `{name}`; valid layers: {valid:?}")]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("unknown variant `{name}`; registered variants: {valid:?}")]
    UnknownVariant { name: String, valid: Vec<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask is not binary: {0}")]
    NonBinaryMask(String),

    #[error("scene {scene_id} (seed {seed}): could not place {n_blobs} blobs without overlap")]
    BlobPlacement { scene_id: u64, seed: u64, n_blobs: usize },

    #[error("segmenter did not converge: validation dice {dice:.4} < {threshold}")]
    NotConverged { dice: f64, threshold: f64 },

    #[error("artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("torch: {0}")]
    Torch(#[from] tch::TchError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse category used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::UnknownVariant { .. } | Error::UnknownLayer { .. } => "config",
            Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Json(_) | Error::Artifact { .. } => "io",
            Error::NotConverged { .. } => "training",
            _ => "compute",
        }
    }
}
