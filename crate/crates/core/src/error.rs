use std::path::PathBuf;

use thiserror::Error;

use crate::sampler::SamplingReport;
use crate::table::Table;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Rows accepted before a sampling run ran out of attempts.
#[derive(Debug)]
pub struct PartialSample {
    pub table: Table,
    pub report: SamplingReport,
    pub requested: usize,
}

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error at line {line}: {message}")]
    Load { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("plugin error: {0}")]
    Plugin(String),

    #[error(
        "sampling budget exhausted: {} of {} rows accepted",
        .0.table.rows.len(),
        .0.requested
    )]
    SamplingExhausted(Box<PartialSample>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Load { .. } => "load",
            Error::Schema(_) => "schema",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Codec(_) => "codec",
            Error::Model(_) => "model",
            Error::Checkpoint(_) => "checkpoint",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Plugin(_) => "plugin",
            Error::SamplingExhausted(_) => "sampling-exhausted",
            Error::Config(_) => "config",
            Error::Context { source, .. } => source.category(),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
