use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("insufficient history: need samples back to t = {needed}, path starts at t = {available}")]
    InsufficientHistory { needed: f64, available: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("argument t = {t} outside the admissible range [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("spectral density is near-singular at node {node} (lambda = {lambda:.6}, condition = {condition:.3e})")]
    NearSingularDensity {
        node: usize,
        lambda: f64,
        condition: f64,
    },

    #[error("minimality condition not verified: {0}")]
    MinimalityNotVerified(String),

    #[error("ill-conditioned operator (condition estimate {condition:.3e}): {reason}")]
    IllConditioned { condition: f64, reason: String },

    #[error("inconsistent mean-square error {value:.3e}: operator is indefinite or the solve failed")]
    Inconsistent { value: f64 },

    #[error("coefficient summability not verified: {0}")]
    Summability(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
