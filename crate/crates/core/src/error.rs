use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum WitError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("instrument column {0} has zero variance")]
    DegenerateColumn(usize),

    #[error("collinearity error: {0}")]
    Collinear(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("treatment has no first-stage projection on the instruments")]
    NoFirstStage,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("identification fails: {0}")]
    Identification(String),

    #[error("ratio alpha/gamma undefined for instrument {0} (gamma is zero but alpha is not)")]
    UndefinedRatio(usize),

    #[error("unknown case {0}")]
    UnknownCase(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WitError>;
