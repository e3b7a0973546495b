use thiserror::Error;

/// Errors raised by the estimators and the data layer.
///
/// Row numbers carried by variants are 1-based.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CamError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("row {row}: missing response value")]
    MissingResponse { row: usize },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("column '{0}' not found in header")]
    UnknownColumn(String),
    #[error("no feature columns")]
    NoFeatures,
    #[error("feature dimension {0} unsupported (must be between 1 and {max})", max = crate::dataset::MAX_DIM)]
    Dimension(usize),
    #[error("no complete cases")]
    NoCompleteCases,
    #[error("row {row} does not observe the features required by pattern {pattern}")]
    PatternIncompatible { row: usize, pattern: String },
    #[error("invalid pattern string '{0}'")]
    InvalidPattern(String),
    #[error("pattern {0} is not part of the adjustment set")]
    PatternNotInSet(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few rows: need at least {needed}, have {have} ({context})")]
    TooFewRows {
        needed: usize,
        have: usize,
        context: String,
    },
    #[error("feature index {index} out of range for dimension {d}")]
    FeatureOutOfRange { index: usize, d: usize },
    #[error("optimal weights are only defined for zero adjustment bias")]
    NonZeroBias,
    #[error("no local data at the query point ({0})")]
    NoLocalData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("estimator failed on subsample draw {draw}: {message}")]
    SubsampleFailure { draw: usize, message: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("too many failed evaluations: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, CamError>;
