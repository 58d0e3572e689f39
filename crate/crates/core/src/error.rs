use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Schema document is malformed or inconsistent with the data header.
    #[error("schema error: {0}")]
    Schema(String),

    /// A field in row `row` (0-based, header excluded) could not be parsed.
    #[error("row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset `{0}` contains no complete rows")]
    EmptyDataset(String),

    /// Invalid option or parameter combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Outcome value outside the support of the family.
    #[error("row {row}: outcome {value} outside the support of the {family} family")]
    Domain {
        row: usize,
        value: f64,
        family: &'static str,
    },

    #[error("no segmentation covers every group: group `{group}` {reason}")]
    Infeasible { group: String, reason: String },

    #[error("Hessian is not positive definite even with ridge {ridge:e}")]
    SingularHessian { ridge: f64 },

    #[error("non-finite value while evaluating the {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool: 2 for configuration
    /// problems, 3 for data problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Json(_) => 2,
            Error::Row { .. }
            | Error::EmptyDataset(_)
            | Error::Domain { .. }
            | Error::Infeasible { .. }
            | Error::Csv(_)
            | Error::Io { .. } => 3,
            Error::SingularHessian { .. } | Error::NonFinite(_) | Error::Shape(_) => 1,
        }
    }
}
