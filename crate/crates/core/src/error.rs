use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("eigensolver did not converge after {sweeps} iterations (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("basis columns are not orthonormal (max Gram deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("degenerate spectrum: {0}")]
    Degenerate(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("idx decode error at byte {offset}: {msg}")]
    Idx { offset: usize, msg: String },

    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NotSquare { .. } => "shape",
            Error::NoConvergence { .. } => "eigensolver",
            Error::NotOrthonormal { .. } => "basis",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "argument",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Idx { .. } => "idx",
            Error::Checkpoint { .. } | Error::CheckpointVersion { .. } => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
