use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter '{0}'; aborting")]
    NanGradient(String),

    #[error("non-finite loss: {0}")]
    NanLoss(String),

    #[error("non-finite value in weights '{0}'; refusing to run inference")]
    NanWeights(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error in {file}: {reason}")]
    Checkpoint { file: String, reason: String },

    #[error("corrupt dataset file {file}: {reason}")]
    Dataset { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
