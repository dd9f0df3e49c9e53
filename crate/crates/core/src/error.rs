use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { column: String, row: usize },

    #[error("row {row}: cannot parse `{value}` as a number in column `{column}`")]
    UnparseableNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("row {row}: unknown category `{value}` in column `{column}`")]
    UnknownCategory {
        column: String,
        row: usize,
        value: String,
    },

    #[error("label column `{column}` is not binary: {detail}")]
    NonBinaryLabel { column: String, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("split of {rows} rows at fraction {fraction} leaves an empty side")]
    EmptySplit { rows: usize, fraction: f64 },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("feature sets differ: {0}")]
    FeatureSetMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact estimation needs N <= {limit}, dataset has {rows} rows")]
    ExactLimitExceeded { rows: usize, limit: usize },

    #[error("dataset has {distinct} distinct rows, support limit is {limit}")]
    SupportLimitExceeded { distinct: usize, limit: usize },

    #[error("no bias predicate within bounds after {attempts} attempts")]
    BiasInduction { attempts: usize },

    #[error("oracle failure in round {round}: {message}")]
    Oracle { round: usize, message: String },

    #[error("configurations are not comparable: {0}")]
    NotComparable(String),
}

impl CalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, CalError::Oracle { .. })
    }
}
