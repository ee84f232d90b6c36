use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimizer has no moment entry for trainable parameter `{0}`")]
    MissingMoment(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown component `{0}`")]
    UnknownComponent(String),

    #[error("expert index {index} out of range for {n_experts} experts")]
    ExpertOutOfRange { index: usize, n_experts: usize },

    #[error("all action dimensions are masked")]
    AllMasked,

    #[error("empty dataset for task {0}")]
    EmptyDataset(usize),

    #[error("constraint unsatisfiable after {draws} draws: {constraint}")]
    Unsatisfiable { draws: usize, constraint: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path}: unknown format version {version}")]
    UnknownVersion { path: PathBuf, version: u32 },

    #[error("checkpoint {path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("checkpoint {path}: payload hash mismatch")]
    HashMismatch { path: PathBuf },

    #[error("metrics schema drift: {0}")]
    SchemaDrift(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
