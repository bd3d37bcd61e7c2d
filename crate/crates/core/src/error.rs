use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report, grouped by how an operator should react.
#[derive(Debug, Error)]
pub enum Error {
    #[error("label vector has {actual} entries but the vocabulary has {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid label state token `{0}`")]
    InvalidState(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid spectrogram: {0}")]
    InvalidSpectrogram(String),

    #[error("waveform is empty")]
    EmptyAudio,
    #[error("waveform contains non-finite samples")]
    NonFiniteSamples,
    #[error("normalization std must be positive, got {0}")]
    ZeroStd(f64),
    #[error("invalid frontend parameters: {0}")]
    InvalidFrontend(String),
    #[error("no decoder available for {0}")]
    UnsupportedAudio(PathBuf),

    #[error("invalid dimensions: {0}")]
    BadDims(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("backbone weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("target class `{0}` has an empty source assignment")]
    EmptyAssignment(String),
    #[error("source index {index} out of range for {k_src} source classes")]
    IndexOutOfRange { index: usize, k_src: usize },
    #[error("non-finite input to the label mapper")]
    NonFiniteInput,
    #[error("mapping file line {line}: {message}")]
    MappingParse { line: usize, message: String },

    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite loss in batch containing clips {0:?}")]
    NonFiniteLoss(Vec<String>),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),

    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("missing split file {0}")]
    MissingSplitFile(PathBuf),
    #[error("unknown instrument `{0}`")]
    UnknownInstrument(String),
    #[error("no audio or cached spectrogram for sample `{0}`")]
    UnresolvedAudio(String),
    #[error("fraction must lie in (0, 1), got {0}")]
    FractionOutOfRange(f64),
    #[error("malformed data file {path}: {message}")]
    DataFormat { path: PathBuf, message: String },

    #[error("invalid configuration key `{key}`: {message}")]
    ConfigInvalid { key: String, message: String },

    #[error("run directory {0} is not empty; run directories are never overwritten")]
    RunDirNotEmpty(PathBuf),
    #[error("no runs found under {0}")]
    NoRunsFound(String),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("backbone fingerprint mismatch: checkpoint {expected}, live {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
