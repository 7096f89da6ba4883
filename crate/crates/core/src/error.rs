use thiserror::Error;

/// Errors raised by the estimators and the simulation harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instrument covariance has rank 0; the first stage carries no signal")]
    NoSignal,

    #[error("outcome is constant (all {0}); the binary model is not identified")]
    DegenerateOutcome(f64),

    #[error("separation detected after {iterations} iterations: {detail}")]
    Separation { iterations: usize, detail: String },

    #[error("design matrix is numerically rank deficient (condition number {condition:.3e})")]
    Collinearity { condition: f64 },

    #[error("information matrix is near singular (condition number {condition:.3e})")]
    NearSingular { condition: f64 },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("experiment failed: {failed} of {total} replications did not produce estimates")]
    ExperimentFailed { failed: usize, total: usize },
}

impl Error {
    /// True when the error stems from the input data or configuration rather
    /// than from a numerical breakdown during estimation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DegenerateSample(_)
                | Error::DimensionMismatch { .. }
                | Error::InvalidParameter(_)
                | Error::DegenerateOutcome(_)
                | Error::Infeasible(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
