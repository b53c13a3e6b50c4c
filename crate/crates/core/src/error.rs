use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("record {record}: missing field `{field}`")]
    MissingField { record: String, field: String },

    #[error("record {record}: cannot resolve image path {}", path.display())]
    UnresolvablePath { record: String, path: PathBuf },

    #[error("duplicate record for patient {patient_id} ({laterality})")]
    DuplicateRecord { patient_id: String, laterality: String },

    #[error("invalid value `{value}` for field `{field}`")]
    InvalidEnum { field: String, value: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image is not square ({width}x{height})")]
    NotSquare { width: usize, height: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training set contains a single class")]
    SingleClassTrainingSet,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("probability {value} for {key} is outside [0, 1]")]
    OutOfRangeProbability { key: String, value: f64 },

    #[error("duplicate score entry {key}")]
    DuplicateKey { key: String },

    #[error("missing external image {}", path.display())]
    MissingExternalImage { path: PathBuf },

    #[error("PSNR is undefined: target maximum is zero and MSE is positive")]
    UndefinedMax,

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("missing channel scores: {}", keys.join(", "))]
    MissingChannel { keys: Vec<String> },

    #[error("no scorer available for channel {channel}")]
    UntrainedScorer { channel: String },

    #[error("too few patients of class {class}: found {found}, need at least {needed}")]
    TooFewPatients {
        class: String,
        found: usize,
        needed: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    Empty,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {message}", path.display())]
    Raster { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingField { .. } => "MissingField",
            Error::UnresolvablePath { .. } => "UnresolvablePath",
            Error::DuplicateRecord { .. } => "DuplicateRecord",
            Error::InvalidEnum { .. } => "InvalidEnum",
            Error::Manifest(_) => "Manifest",
            Error::InvalidImage(_) => "InvalidImage",
            Error::NotSquare { .. } => "NotSquare",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::SingleClassTrainingSet => "SingleClassTrainingSet",
            Error::Parse { .. } => "ParseError",
            Error::OutOfRangeProbability { .. } => "OutOfRangeProbability",
            Error::DuplicateKey { .. } => "DuplicateKey",
            Error::MissingExternalImage { .. } => "MissingExternalImage",
            Error::UndefinedMax => "UndefinedMax",
            Error::EmptyValidation => "EmptyValidation",
            Error::MissingChannel { .. } => "MissingChannel",
            Error::UntrainedScorer { .. } => "UntrainedScorer",
            Error::TooFewPatients { .. } => "TooFewPatients",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Empty => "Empty",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Raster { .. } => "RasterError",
            Error::Io { .. } => "IoError",
            Error::Internal(_) => "Internal",
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for data errors, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Internal(_) => 4,
            _ => 3,
        }
    }
}
