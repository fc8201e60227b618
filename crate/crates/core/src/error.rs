use std::path::PathBuf;

use ragan_tensor::TensorError;
use thiserror::Error;

use crate::losses::LossBreakdown;

#[derive(Debug, Error)]
pub enum RaganError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("image already carries an age channel")]
    AlreadyAugmented,
    #[error("missing age channel: expected 4 input channels, got {0}")]
    MissingAgeChannel(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("weight container: {0}")]
    Weights(String),
    #[error("cannot parse `{name}`: bad token `{token}`")]
    FilenameParse { name: String, token: String },
    #[error("insufficient source files: {0}")]
    Shortfall(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("non-finite {phase} loss at step {step}: {breakdown:?}")]
    NonFiniteLoss {
        step: u64,
        phase: &'static str,
        breakdown: Box<LossBreakdown>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("age estimator unavailable: {0}")]
    EstimatorUnavailable(String),
    #[error("image codec: {0}")]
    Image(String),
}

impl RaganError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::InvalidRange { .. } => "invalid_range",
            Self::Validation(_) => "validation",
            Self::AlreadyAugmented => "already_augmented",
            Self::MissingAgeChannel(_) => "missing_age_channel",
            Self::Shape(_) => "shape",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Weights(_) => "weights",
            Self::FilenameParse { .. } => "parse",
            Self::Shortfall(_) => "shortfall",
            Self::Integrity(_) => "integrity",
            Self::NonFiniteLoss { .. } => "non_finite_loss",
            Self::Protocol(_) => "protocol",
            Self::EstimatorUnavailable(_) => "estimator_unavailable",
            Self::Image(_) => "image",
        }
    }
}

pub type Result<T, E = RaganError> = std::result::Result<T, E>;
