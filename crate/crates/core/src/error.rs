use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected} features, got {actual}")]
    LayerShape {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("corrupt weights file: {0}")]
    CorruptFile(String),

    #[error("weights blob length mismatch: header declares {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },

    #[error("frequency {hr_hz:.4} Hz is at or above the Nyquist limit {nyquist_hz:.4} Hz")]
    Nyquist { hr_hz: f64, nyquist_hz: f64 },

    #[error("no dominant in-band spectral peak (peak/median PSD ratio {ratio:.3})")]
    NoDominantPeak { ratio: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("relative error undefined: truth value at index {0} is zero")]
    ZeroTruth(usize),

    #[error("training aborted: {reason}")]
    TrainingAborted {
        reason: String,
        /// Last finite parameter set, encoded in the weights file format.
        checkpoint: Option<Checkpoint>,
    },

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Encoded parameters; `Debug` shows only the size.
#[derive(Clone, PartialEq, Eq)]
pub struct Checkpoint(pub Vec<u8>);

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Checkpoint({} bytes)", self.0.len())
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
