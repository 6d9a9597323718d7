//! Crate-wide error type.

/// Errors produced by construction, validation, numerics and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A quantity that must be finite was NaN or infinite.
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    /// A parameter violated its documented range or shape contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Measure construction rejected its inputs.
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    /// MDP validation failed; all violations are listed.
    #[error("invalid mdp: {}", .0.join("; "))]
    InvalidMdp(Vec<String>),

    /// Training produced a non-finite loss or activation.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
