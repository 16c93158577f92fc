use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} cannot combine shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration mismatch: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing values in climate series of location {0}; run knn_impute first")]
    MissingValues(u32),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("checksum mismatch in blob `{0}`")]
    Checksum(String),

    #[error("blob `{0}` is truncated")]
    Truncated(String),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad usage or
    /// diverging numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::MissingValues(_)
                | Error::Checksum(_)
                | Error::Truncated(_)
                | Error::Version { .. }
                | Error::Io { .. }
                | Error::Manifest(_)
        )
    }
}
