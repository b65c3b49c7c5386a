use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a shape, range or wiring precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no pairs found under {0}")]
    NoPairs(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: cannot decode tensor archive: {message}")]
    Archive { path: PathBuf, message: String },

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter `{0}` missing from archive")]
    MissingParameter(String),

    #[error("checkpoint was written with a different configuration:\n{diff}")]
    ConfigMismatch { diff: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples: {samples}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: String,
        detail: String,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the tool was invoked rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::NoPairs(_) | Error::ConfigMismatch { .. }
        )
    }
}
