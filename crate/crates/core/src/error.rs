use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {left:?} vs {right:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` is not registered")]
    UnknownParam(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("no head for task {0}")]
    MissingHead(u32),

    #[error("task {0} already stored")]
    DuplicateTask(u32),

    #[error("architecture mismatch: bank expects {expected}, got {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("checksum error: {0}")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::UnknownParam(_) => "unknown_param",
            Error::DuplicateParam(_) => "duplicate_param",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyClass(_) => "empty_class",
            Error::UnknownTask(_) => "unknown_task",
            Error::MissingHead(_) => "missing_head",
            Error::DuplicateTask(_) => "duplicate_task",
            Error::ArchitectureMismatch { .. } => "architecture_mismatch",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Checksum(_) => "checksum",
            Error::Malformed(_) => "malformed",
            Error::Config(_) => "config",
            Error::UnknownConfigKeys(_) => "unknown_config_keys",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
