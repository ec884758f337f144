use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid lattice, model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside its documented domain.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("size mismatch: expected {expected}, got {actual} ({what})")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// The homogeneous symbol is not positive definite where it has to be.
    #[error("lattice instability: {0}")]
    Instability(String),

    /// Eigenvalues fell into the dead zone between "zero" and "clearly nonzero",
    /// or the zero/negative mode counts did not match the expected ones.
    #[error("ambiguous spectrum: {0}")]
    AmbiguousSpectrum(String),

    #[error("no convergence: {0}")]
    Convergence(String),

    /// A stationary point failed its mode-count certificate.
    #[error("certification failed: {reason} (negative modes {negative}, zero modes {zero})")]
    Certification {
        reason: String,
        negative: usize,
        zero: usize,
    },

    #[error("LAPACK routine {routine} failed with info = {info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
