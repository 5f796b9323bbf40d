use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("degrees of freedom {dof} too small for dimension {dim}")]
    DofTooSmall { dof: f64, dim: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown level {level:?} for factor {factor:?}")]
    UnknownLevel { factor: String, level: String },

    #[error("malformed formula: {0}")]
    MalformedFormula(String),

    #[error("invalid factor scheme: {0}")]
    InvalidScheme(String),

    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("all {0} rows were dropped during loading")]
    AllRowsDropped(usize),

    #[error("design matrix is rank deficient: {0}")]
    DegenerateDesign(String),

    #[error("sampler produced a non-finite state at iteration {0}")]
    NonFiniteState(usize),

    #[error("pooled covariance is singular")]
    SingularPooled,

    #[error("every margin of factor pair {0} was excluded")]
    AllMarginsExcluded(String),

    #[error("need at least {needed} posterior draws, have {have}")]
    InsufficientDraws { needed: usize, have: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 for I/O failures, 2 for everything else
    /// (validation, configuration, numerical).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::FileUnreadable { .. } | Error::Io(_) => 1,
            Error::Csv(e) if e.is_io_error() => 1,
            _ => 2,
        }
    }
}
