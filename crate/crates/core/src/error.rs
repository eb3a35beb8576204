use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label: {0}")]
    Label(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("architecture file line {line}: {msg}")]
    ArchParse { line: usize, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid loss input: {0}")]
    Loss(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {msg}")]
    NonFinite { step: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
