//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (audio, embeddings, manifests).
    #[error("input error: {0}")]
    Input(String),

    #[error("ingest error at byte {offset}: {message}")]
    Ingest { offset: usize, message: String },

    #[error("ctc target infeasible: {frames} frames but at least {required} required")]
    CtcInfeasible { frames: usize, required: usize },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("non-finite value detected: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch in {section}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        section: String,
        stored: u32,
        computed: u32,
    },

    #[error("checkpoint does not match model:\n{0}")]
    CheckpointShape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
