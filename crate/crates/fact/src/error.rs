use thiserror::Error;

/// Errors surfaced by the library. Domain failures (infeasible systems,
/// degenerate marginals) are distinguished from input/schema problems so the
/// CLI can map them to exit codes.
#[derive(Debug, Error)]
pub enum FactError {
    #[error("invalid count at position {index}: {value} (counts must be nonnegative)")]
    InvalidCount { index: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid label in record {index}: {field} = {value} (must be 0 or 1)")]
    InvalidLabel {
        index: usize,
        field: &'static str,
        value: i64,
    },

    #[error("free coordinates outside their box: {0}")]
    InfeasibleCoordinates(String),

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(String),

    #[error("invalid calibration scores: require 0 <= v0 < v1 <= 1, got v0={v0}, v1={v1}")]
    InvalidScores { v0: f64, v1: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("iteration limit reached")]
    IterationLimit,

    #[error("degenerate base classifier: group {group} ROC point lies on the diagonal")]
    DegenerateBaseClassifier { group: u8 },

    #[error("target tensor not realizable from the base classifier: {0}")]
    NotRealizable(String),

    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("unknown fairness definition `{0}`")]
    UnknownDefinition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FactError>;
