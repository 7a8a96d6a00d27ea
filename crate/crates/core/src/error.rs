//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulator, training loop, solvers, and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unsupported combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Mismatched vector/matrix dimensions.
    #[error("shape error: {0}")]
    Shape(String),
    /// A numerical routine produced or detected a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The curvature term gᵀF⁻¹g of a natural-gradient step was not positive,
    /// so no step length can be derived. Callers skip the update.
    #[error("degenerate natural-gradient step: {0}")]
    DegenerateStep(String),
    /// Training aborted (non-finite parameters or a diverging critic).
    #[error("training error: {0}")]
    Training(String),
    /// Malformed config file, checkpoint, or result file.
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
