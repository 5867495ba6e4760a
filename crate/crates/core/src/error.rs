use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("depth mismatch: {0} vs {1}")]
    DepthMismatch(usize, usize),

    #[error("lattice too large for dense storage: {size} sites (limit {limit})")]
    SizeGuard { size: usize, limit: usize },

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rejection sampler exceeded {0} proposals")]
    RejectionLimit(u64),

    #[error("potential table has levels 0..={have}, need level {need}")]
    MissingLevel { need: usize, have: usize },

    #[error("quantile map: {0}")]
    Quantile(String),

    #[error("unsupported regime: {0}")]
    Regime(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
