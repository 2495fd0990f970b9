use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum BtsError {
    #[error("invalid case id {0}; expected 1..=4")]
    InvalidCase(u8),

    #[error("{context}: shape mismatch, meta declares {declared:?} ({expected_bytes} bytes) but {path} holds {actual_bytes} bytes")]
    ShapeMismatch {
        context: &'static str,
        path: PathBuf,
        declared: Vec<usize>,
        expected_bytes: u64,
        actual_bytes: u64,
    },

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {reason}")]
    Meta { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("labeled set is missing cases {0:?}")]
    MissingCases(Vec<u8>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hypersphere center has not been initialized")]
    CenterUninitialized,

    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        component: &'static str,
    },

    #[error("input dimensions {actual:?} do not match the checkpoint (tau, S, K) = {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("output directory {0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),
}

impl BtsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BtsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line harness: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            BtsError::Config(_) | BtsError::OutputExists(_) | BtsError::InvalidCase(_) => 1,
            BtsError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BtsError>;
