use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("optimization diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("learning-rate search failed: {0}")]
    SearchFailed(String),

    #[error("alignment error: spectrogram has {spec_frames} frames, piano roll has {roll_frames}")]
    Alignment {
        spec_frames: usize,
        roll_frames: usize,
    },

    #[error("split validation failed: {0}")]
    Split(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio decoding failed: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
