//! Error type shared across the library.

use thiserror::Error;

/// Errors surfaced by oracle evaluation, integration, scheduling, and metrics.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the documented domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The noise level fell below the floor where derivative formulas are reliable.
    #[error("sigma {sigma:.3e} is below the singularity floor {floor:.3e}")]
    SingularSigma { sigma: f64, floor: f64 },

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A mixture specification failed validation.
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    /// A timestep schedule failed validation.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// An exact metric was asked to process more samples than its size cap.
    #[error("sample count {n} exceeds the cap {cap} for this metric")]
    SizeCapExceeded { n: usize, cap: usize },

    /// Richardson check failed: refining the integration grid still moves the answer.
    #[error("reference integrator did not converge: refinement delta {delta:.3e} exceeds {tol:.3e}")]
    NonConvergence { delta: f64, tol: f64 },

    /// An iteration budget was exhausted before the computation finished.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The operation requires a different parameterization kind.
    #[error("parameterization kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: &'static str, got: &'static str },

    /// A JSON payload failed to serialize or parse.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
