use thiserror::Error;

use crate::flow::FailureReason;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid metric at state: {0}")]
    InvalidMetric(String),
    #[error("zero vector where a nonzero direction is required")]
    ZeroVector,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mechanism validation failed: {}", .0.join("; "))]
    MechanismValidation(Vec<String>),
    #[error("integration failed at t = {t:e}: {reason}")]
    Integration { t: f64, reason: FailureReason },
    #[error("time {t:e} lies outside the trajectory domain")]
    DomainTruncated { t: f64 },
    #[error("vector field vanishes at the evaluation point")]
    ZeroField,
    #[error("every grid point was truncated by the trajectory domain")]
    EmptyGrid,
    #[error("no sign change of the level-set residual was found")]
    LevelSetNotFound,
    #[error("no start reached the constraint tolerance (best residual {best_residual:e})")]
    Infeasible { best_residual: f64 },
    #[error("objective could not be evaluated at any start: {0}")]
    ObjectiveFailure(String),
    #[error("invalid objective specification: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
