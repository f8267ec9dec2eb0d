//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    /// An argument lies outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function evaluated to a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A model or layer could not be built from the given dimensions.
    #[error("construction error: {0}")]
    Construction(String),

    /// A planted rank exceeds what the layer shape can hold.
    #[error("rank {rank} too large for layer {layer} of shape {m}x{n}")]
    RankTooLarge {
        layer: String,
        rank: usize,
        m: usize,
        n: usize,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("bad checkpoint magic {found:?}")]
    MagicMismatch { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },

    /// Checkpoint layers do not line up with the receiving model.
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A weight could not be serialized because it is NaN or infinite.
    #[error("refusing to write non-finite weight in layer {0}")]
    NonFiniteWeight(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
