use std::path::PathBuf;

/// Errors produced by the purification pipeline and its supporting modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("inverse transform left an imaginary residue of {residue:e} (limit {limit:e}); spectrum is not Hermitian")]
    Asymmetry { residue: f64, limit: f64 },

    #[error("missing prerequisite {path}: {hint}")]
    MissingPrerequisite { path: PathBuf, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
