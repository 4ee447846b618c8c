use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV file {path}: {message}")]
    MalformedWav { path: PathBuf, message: String },

    #[error("unsupported channel count: {0} (mono required)")]
    UnsupportedChannelCount(u16),

    #[error("unsupported sample encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("unsupported sample rate {found} Hz (pipeline requires {required} Hz)")]
    SampleRate { found: u32, required: u32 },

    #[error("invalid audio clip: {0}")]
    InvalidClip(String),

    #[error("invalid segment annotation for '{token_id}': {message}")]
    InvalidAnnotation { token_id: String, message: String },

    #[error("missing annotation for token '{0}'")]
    MissingAnnotation(String),

    #[error("empty interval")]
    EmptyInterval,

    #[error("zero-power signal")]
    ZeroPower,

    #[error("noise ({noise} samples) is shorter than speech ({speech} samples)")]
    NoiseTooShort { speech: usize, noise: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no threshold: the response curve never reaches 0.90 from above")]
    NoThreshold,

    #[error("no F0 detected in '{0}'")]
    NoF0(String),

    #[error("interval of {samples} samples is shorter than one {window}-sample analysis window")]
    IntervalTooShort { samples: usize, window: usize },

    #[error("input has {frames} frames but the network needs at least {required}")]
    InputTooShort { frames: usize, required: usize },

    #[error("invalid data split: {0}")]
    InvalidSplit(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid feature cache: {0}")]
    FeatureCache(String),

    #[error("ASR backend failure: {0}")]
    Backend(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
