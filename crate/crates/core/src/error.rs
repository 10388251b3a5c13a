//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all fallible operations in the library.
#[derive(Debug, Error)]
pub enum FhError {
    /// A caller violated an argument contract (dimension mismatch, bad range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input that must be positive definite is not, or an operation left
    /// the positive-definite cone. Carries a short description of the
    /// offending quantity (e.g. an eigenvalue bound).
    #[error("domain error: {0}")]
    Domain(String),

    /// An inner linear system was singular or lost numerical rank.
    #[error("numerical rank failure: {0}")]
    NumericalRank(String),

    /// A low-rank factor would exceed its configured rank cap.
    #[error("rank capacity exceeded: have {current}, cap {cap}")]
    Capacity { current: usize, cap: usize },

    /// The diagonal + low-rank representation accumulated an imaginary
    /// residual above tolerance, indicating a corrupted representation.
    #[error("representation corrupted: imaginary residual {residual:.3e} exceeds {tolerance:.3e}")]
    RepresentationCorrupted { residual: f64, tolerance: f64 },

    /// An iterative solver produced NaN or Inf.
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    /// The requested operator shape is not supported by this operation.
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),

    /// Not enough data to carry out an estimation step.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Configuration file problems; collects every issue found.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FhError>;

impl FhError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FhError::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        FhError::Domain(msg.into())
    }

    /// Exit code for the CLI: 2 for configuration problems, 3 for numerical
    /// failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            FhError::InvalidConfig(_) | FhError::Contract(_) => 2,
            _ => 3,
        }
    }
}
