use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed WAV file: {0}")]
    Wav(String),

    #[error("unsupported audio format: {0}")]
    UnsupportedAudio(String),

    #[error("clip has {len} samples, shorter than one {n_fft}-sample frame")]
    ClipTooShort { len: usize, n_fft: usize },

    #[error("embedding norm {0:e} is too small to normalize")]
    DegenerateEmbedding(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("unknown section '{0}'")]
    UnknownSection(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
