use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the command line front end to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data, bad configuration, I/O failure.
    Data,
    /// Non-finite values during training, or a curve fit that could not be made.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: csv: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("manifest {0:?} has no records")]
    EmptyManifest(String),
    #[error("record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("cannot rescale labels: all {0} labels are identical")]
    DegenerateLabels(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image {id:?} is {width}x{height}, smaller than patch size {size}")]
    ImageTooSmall {
        id: String,
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("model file: unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("model file is corrupt: {0}")]
    CorruptFile(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("logistic fit failed: {0}")]
    FitFailed(String),
    #[error("unknown image id {0:?}")]
    MissingImage(String),
    #[error("artifact {path} failed verification: {reason}")]
    StaleArtifact { path: PathBuf, reason: String },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. } | Error::FitFailed(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
