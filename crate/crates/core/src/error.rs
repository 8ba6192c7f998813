use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by map loading, index construction and the localization
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation in {entity}: {message}")]
    Schema { entity: String, message: String },

    #[error("{entity} references missing {target}")]
    DanglingReference { entity: String, target: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate id {id} in {context}")]
    DuplicateId { context: String, id: u64 },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("PCA needs at least {required} samples, got {actual}")]
    InsufficientSamples { required: usize, actual: usize },

    #[error("descriptor projects to the zero vector (norm {norm:e})")]
    DegenerateProjection { norm: f64 },

    #[error("degenerate P3P configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("binary format error in {path}: {message}")]
    BinaryFormat { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            entity: entity.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    /// Whether the error comes from the filesystem rather than from content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
