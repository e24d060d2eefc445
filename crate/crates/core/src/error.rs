use thiserror::Error;

pub type Result<T, E = SimvaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimvaError {
    /// Tensor shapes or dimensions that cannot be combined.
    #[error("shape error: {0}")]
    Shape(String),

    /// A normalization would divide by a zero-norm vector.
    #[error("singularity: {0}")]
    Singularity(String),

    /// Invalid argument or configuration value.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed container/feature file.
    #[error("format error: {0}")]
    Format(String),

    /// Two parameter stores that should line up do not.
    #[error("structural mismatch; differing keys: {}", .keys.join(", "))]
    Structural { keys: Vec<String> },

    /// A contract between components was broken (e.g. the ground truth
    /// class is missing from a training vocabulary).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("non-finite values in `{0}`")]
    NonFinite(String),

    #[error("unknown key `{key}`; available: {}", .available.join(", "))]
    UnknownKey { key: String, available: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimvaError {
    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            SimvaError::Shape(_) => "shape",
            SimvaError::Singularity(_) => "singularity",
            SimvaError::Validation(_) => "validation",
            SimvaError::Format(_) => "format",
            SimvaError::Structural { .. } => "structural",
            SimvaError::Invariant(_) => "invariant",
            SimvaError::NonFinite(_) => "non_finite",
            SimvaError::UnknownKey { .. } => "unknown_key",
            SimvaError::Io(_) => "io",
            SimvaError::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SimvaError::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        SimvaError::Validation(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        SimvaError::Format(msg.into())
    }
}
