//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("{path}: wrong magic number: expected {expected:#010x}, got {actual:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("{path}: truncated file: needed {needed} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        got: usize,
    },

    #[error("image/label record count mismatch: {images} images vs {labels} labels")]
    RecordCountMismatch { images: usize, labels: usize },

    #[error("cannot partition {dataset_size} samples across {num_clients} clients")]
    TooManyClients {
        num_clients: usize,
        dataset_size: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite parameter entry at index {index}")]
    NonFiniteParameter { index: usize },

    #[error("client {client_id} failed in round {round}: {source}")]
    ClientFailed {
        client_id: usize,
        round: usize,
        source: Box<Error>,
    },

    #[error("momentum queried before any optimizer step")]
    MomentumNotStarted,

    #[error("mean gradient is the zero vector")]
    ZeroMeanGradient,

    #[error("need at least {required} distinct local steps, got {distinct}")]
    InsufficientDistinctSteps { distinct: usize, required: usize },

    #[error("round {round} out of range: configuration allows {rounds} rounds")]
    RoundsExhausted { round: usize, rounds: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output directory holds a run with config hash {existing}, current config hashes to {current}")]
    ManifestMismatch { existing: String, current: String },

    #[error("incomplete runs, missing: {}", .missing.join(", "))]
    IncompleteRuns { missing: Vec<String> },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
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
