use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate direction: norm {norm:e} is below {floor:e}")]
    Degenerate { norm: f64, floor: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(
        "rejection envelope too tight: acceptance rate {rate:e} after {proposals} proposals, \
         use a smaller lambda"
    )]
    EnvelopeTooTight { rate: f64, proposals: u64 },

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("sampler aborted at step {step} (t = {t}): non-finite drift")]
    SamplerAborted { step: usize, t: f64 },

    #[error("invalid potential spec `{text}`: {reason}")]
    PotentialSyntax { text: String, reason: String },

    #[error("{path}: line {line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}: line {line}: {reason}")]
    Csv {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
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

/// Failures specific to reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"TFLOWCK1\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("{0} trailing bytes after the last array")]
    TrailingBytes(u64),

    #[error("inconsistent shape metadata: {0}")]
    ShapeMismatch(String),

    #[error("malformed header: {0}")]
    Header(String),
}
