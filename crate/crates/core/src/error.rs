use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: &'static str, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },

    #[error("layer table error: {0}")]
    LayerTable(String),

    #[error("matrix square root failed: {0}")]
    MatrixSqrt(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("could not decode image {path}: {message}")]
    ImageDecode { path: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint fingerprint mismatch: stored {stored}, expected {expected}")]
    FingerprintMismatch { stored: String, expected: String },

    #[error("model `{0}` is not loaded")]
    UnknownModel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn validation(field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            field,
            message: message.into(),
        }
    }

    /// Stable machine-readable code, used by the HTTP layer.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InputTooSmall(_) => "input_too_small",
            Error::Validation { .. } => "validation_error",
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => "non_finite",
            Error::LayerTable(_) => "layer_table",
            Error::MatrixSqrt(_) => "matrix_sqrt",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::ImageDecode { .. } | Error::Image(_) => "invalid_image",
            Error::Checkpoint { .. } => "checkpoint",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::UnknownModel(_) => "model_unavailable",
            Error::Parse(_) => "parse_error",
            Error::Io(_) => "io_error",
            Error::Tensor(_) | Error::Json(_) => "internal",
        }
    }

    /// The offending request field, when the error is tied to one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            Error::Validation { field, .. } => Some(field),
            Error::ImageDecode { .. } | Error::Image(_) => Some("image"),
            Error::UnknownModel(_) => Some("model"),
            _ => None,
        }
    }
}
