//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Divergence of a simulated path is *not*
/// an error: it is recorded on the trajectory itself (see
/// [`crate::simulate::Trajectory::diverged_at`]).
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its contract (dimension mismatch,
    /// non-square matrix, off-grid sample time, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A matrix required to have full column rank did not.
    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),

    /// A vector field produced NaN/Inf on the probe domain.
    #[error("non-finite field output: {0}")]
    NonFiniteField(String),

    /// An expert rollout diverged while generating training data.
    #[error("expert rollout diverged: {0}")]
    ExpertUnstable(String),

    /// Contraction certification found a probe point with non-negative
    /// log norm. Carries the worst probe.
    #[error("contraction certification failed: log norm {log_norm} at t={t}, x={state:?}")]
    CertificationFailed {
        t: f64,
        state: Vec<f64>,
        log_norm: f64,
    },

    /// Training aborted (non-finite loss or gradient).
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    /// Configuration failed schema validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
