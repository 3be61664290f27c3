use std::path::PathBuf;

/// Errors raised across the localization pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes or dimensions of two related objects disagree.
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// The operation needs data the inputs do not carry (e.g. attention maps).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("key {key} not found (available: {})", available.join(", "))]
    NotFound { key: String, available: Vec<String> },

    /// The container file is malformed.
    #[error("format error: {0}")]
    Format(#[from] FormatError),

    /// An embedding backend failed on a particular window.
    #[error("backend failed on window at (top={top}, left={left}): {source}")]
    Backend {
        top: usize,
        left: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        /// Flattened parameters of the last head that produced a finite validation loss.
        last_good: Vec<f32>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("jpeg encoding failed: {0}")]
    Jpeg(String),

    #[error("config error: {0}")]
    Config(String),
}

/// Structural problems in a tensor container.
#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated tensor {name}: needs bytes {start}..{end}, file payload has {available}")]
    Truncated {
        name: String,
        start: u64,
        end: u64,
        available: u64,
    },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unsupported dtype {dtype} for tensor {name}")]
    Dtype { name: String, dtype: String },

    #[error("misaligned tensor {name} at offset {offset}")]
    Misaligned { name: String, offset: u64 },

    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
