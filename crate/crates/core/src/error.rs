use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("channel mismatch: layout has {expected} sensors but waveform has {found} channels")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("non-finite sample at row {row}, channel {channel}")]
    NonFiniteSample { row: usize, channel: usize },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("insufficient history for step at sample {sample}: window needs {needed} samples")]
    InsufficientHistory { sample: usize, needed: usize },

    #[error("degenerate window: reservoir state has zero RMS")]
    DegenerateWindow,

    #[error("zero variance: eigenvalue spectrum sums to zero")]
    ZeroVariance,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no footsteps detected in {0}")]
    NoSteps(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::DegenerateWindow
            | Error::ZeroVariance
            | Error::Singular(_)
            | Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
