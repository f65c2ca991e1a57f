use std::path::PathBuf;

/// Errors produced by the numerical kernels, the trainers and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}: singular system; supply delta > 0")]
    Singular(&'static str),

    #[error(
        "{0}: matrix is not positive definite; add a ridge (lambda * eps) to the normal matrix"
    )]
    NotPositiveDefinite(&'static str),

    #[error("{0}: matrix is not symmetric")]
    NotSymmetric(&'static str),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("label matrix must be binary (0/1); found {value} at ({row}, {col})")]
    NonBinary { row: usize, col: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Data(String),

    #[error("total actual energy is zero; energy error is undefined")]
    ZeroEnergy,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(
        op: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input or configuration rather than numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::NonBinary { .. }
                | Error::DimensionMismatch { .. }
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Json { .. }
                | Error::Data(_)
        )
    }
}
