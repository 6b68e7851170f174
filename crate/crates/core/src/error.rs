use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("InvalidStride: stride must be >= 1, got {0}")]
    InvalidStride(usize),
    #[error("NotScalar: backward needs a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("NoTape: the tape was already consumed by a previous backward pass")]
    NoTape,
    #[error("BadMagic: {0}")]
    BadMagic(String),
    #[error("UnsupportedDatatype: {0}")]
    UnsupportedDatatype(String),
    #[error("UnsupportedDims: expected 3 spatial dims, header says {0}")]
    UnsupportedDims(i16),
    #[error("InvalidSpacing: {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("NoForeground: segmentation mask has no nonzero labels")]
    NoForeground,
    #[error("OutOfBounds: {0}")]
    OutOfBounds(String),
    #[error("ZeroReference: reference volume has zero energy")]
    ZeroReference,
    #[error("ZeroVariance: {0}")]
    ZeroVariance(String),
    #[error("TooSmall: {0}")]
    TooSmall(String),
    #[error("TooFewSamples: need at least 2 samples per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("TOutOfRange: {0}")]
    TOutOfRange(String),
    #[error("OddDim: embedding dimension must be even, got {0}")]
    OddDim(usize),
    #[error("IndivisibleExtent: {0}")]
    IndivisibleExtent(String),
    #[error("DataMissing: {0}")]
    DataMissing(String),
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error("CheckpointMismatch: {0}")]
    CheckpointMismatch(String),
    #[error("MissingPrediction: no prediction for case {0}")]
    MissingPrediction(String),
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("Format: {0}")]
    Format(String),
}

impl Error {
    /// Stable identifier printed in front of CLI error messages.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidStride(_) => "InvalidStride",
            Error::NotScalar(_) => "NotScalar",
            Error::NoTape => "NoTape",
            Error::BadMagic(_) => "BadMagic",
            Error::UnsupportedDatatype(_) => "UnsupportedDatatype",
            Error::UnsupportedDims(_) => "UnsupportedDims",
            Error::InvalidSpacing(_) => "InvalidSpacing",
            Error::NoForeground => "NoForeground",
            Error::OutOfBounds(_) => "OutOfBounds",
            Error::ZeroReference => "ZeroReference",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::TooSmall(_) => "TooSmall",
            Error::TooFewSamples(..) => "TooFewSamples",
            Error::TOutOfRange(_) => "TOutOfRange",
            Error::OddDim(_) => "OddDim",
            Error::IndivisibleExtent(_) => "IndivisibleExtent",
            Error::DataMissing(_) => "DataMissing",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::MissingPrediction(_) => "MissingPrediction",
            Error::Io { .. } => "Io",
            Error::Format(_) => "Format",
        }
    }

    /// Whether the failure stems from bad user input or configuration
    /// (as opposed to an internal fault).
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NoTape | Error::NotScalar(_) | Error::Format(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
