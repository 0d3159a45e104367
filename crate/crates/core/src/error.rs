//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up. `location` names the
    /// offending layer or operation.
    #[error("shape mismatch in {location}: {detail}")]
    ShapeMismatch { location: String, detail: String },

    /// backward() was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown task '{0}'")]
    UnknownTask(String),

    #[error("unknown layer or tap id '{0}'")]
    UnknownLayer(String),

    /// A numeric parameter is outside its legal range.
    #[error("invalid parameter {name}: {detail}")]
    InvalidParam { name: &'static str, detail: String },

    /// Structural surgery cannot rewrite a consumer of a pruned layer.
    #[error("structural error on edge {edge}: {detail}")]
    Structural { edge: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A pipeline stage input is missing or inconsistent with its producer.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// Training produced a non-finite loss.
    #[error("training divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// Re-anchor a shape error on the layer that triggered it.
    pub fn in_layer(self, layer_id: &str) -> Self {
        match self {
            Error::ShapeMismatch { detail, .. } => Error::ShapeMismatch {
                location: format!("layer '{layer_id}'"),
                detail,
            },
            other => other,
        }
    }
}
