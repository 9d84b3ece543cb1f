use std::path::PathBuf;

/// Everything that can go wrong inside the library.
///
/// Variants are grouped so a front end can map them onto exit codes:
/// IO and on-disk format problems, validation problems, and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("config: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated payload ({0})")]
    Truncated(String),

    #[error("checkpoint: corrupt entry: {0}")]
    Corrupt(String),

    #[error("checkpoint: no tensor named {0:?}")]
    MissingTensor(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem or by malformed files.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Image { .. }
                | Error::Sample { .. }
                | Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::Truncated(_)
                | Error::Corrupt(_)
                | Error::MissingTensor(_)
        )
    }

    /// True for failures caused by bad user input (arguments, config values, shapes).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::Config { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
