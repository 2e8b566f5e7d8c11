use thiserror::Error;

/// Errors produced by the estimators, tests and data loaders.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is singular or not positive definite")]
    SingularMatrix,

    #[error("no convergence after {iterations} iterations")]
    ConvergenceFailure {
        iterations: usize,
        /// Last iterate, kept for diagnostics.
        last: Vec<f64>,
    },

    #[error("observation {0} coincides with the location estimate")]
    DegenerateObservation(usize),

    #[error("k = {k} out of range (valid: {min}..={max})")]
    InvalidK { k: usize, min: usize, max: usize },

    #[error("spectrum not usable: {0}")]
    InvalidSpectrum(String),

    #[error("response has {distinct} distinct values, need at least {required}")]
    InsufficientVariation { distinct: usize, required: usize },

    #[error("{slices} slices cannot test k = {k}; increase H to at least {}", k + 2)]
    InvalidSlices { slices: usize, k: usize },

    #[error("bootstrap replicate {index} failed twice: {reason}")]
    ReplicateFailure { index: usize, reason: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("column not found: {0}")]
    ColumnNotFound(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures that stem from the numbers rather than from the
    /// input format or the caller's arguments.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix
                | Error::ConvergenceFailure { .. }
                | Error::DegenerateObservation(_)
                | Error::InvalidSpectrum(_)
                | Error::ReplicateFailure { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
