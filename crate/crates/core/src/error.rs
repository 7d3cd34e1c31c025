use std::path::PathBuf;

/// Errors produced by the MPFC library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("solver failure after {iterations} iterations: {reason}")]
    SolverFailure { iterations: usize, reason: String },

    #[error("dataset generation failed: {failed} of {total} samples could not be labeled")]
    TooManyFailures { failed: usize, total: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Short stable tag for the variant, for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InvalidConfig(_) => "config",
            Error::SolverFailure { .. } => "solver",
            Error::TooManyFailures { .. } => "dataset",
            Error::EmptyDataset => "empty-dataset",
            Error::TrainingDiverged { .. } => "training",
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
