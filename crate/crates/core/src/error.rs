use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed manifest, unreadable image, bad label, and similar input problems.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf encountered during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("blank image: stains unidentifiable")]
    BlankImage,

    #[error("no positive pairs in batch")]
    NoPositivePairs,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding row {row} is not unit-norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::BlankImage | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
