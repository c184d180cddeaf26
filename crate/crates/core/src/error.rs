use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-deterministic computation: {0}")]
    NonDeterministic(String),

    #[error("unknown teacher flavor `{0}` (expected masked-reconstruction, instance-contrastive or random-frozen)")]
    UnknownFlavor(String),

    #[error("non-finite loss in batch {batch} (sample {sample}): tfd={tfd} sfd={sfd}")]
    NonFiniteLoss {
        batch: usize,
        sample: usize,
        tfd: f64,
        sfd: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding checkpoint files or assembling teacher banks.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"DMTC\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: String,
        needed: u64,
        available: u64,
    },

    #[error("inconsistent metadata: {0}")]
    InconsistentMetadata(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("teacher embedding dims differ: {first} vs {other}")]
    DimMismatch { first: usize, other: usize },

    #[error("teacher input geometry differs: {0}")]
    GeometryMismatch(String),
}
