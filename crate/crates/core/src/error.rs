//! Crate-wide error type.

use std::path::Path;

/// Everything that can go wrong across the pipeline, from shape mismatches in
/// network plumbing to corrupt dataset records.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Tensor/layer shape violation; the message names both sides.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid or inconsistent configuration (bad key, out-of-range value).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or inconsistent stored data (dataset records, manifests).
    #[error("data error: {0}")]
    Data(String),
    /// Checkpoint archive problems (bad magic, missing tensor, wrong shape).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Training diverged; names the first tensor found to be non-finite.
    #[error("non-finite value in tensor '{name}' at iteration {iteration}")]
    NonFinite { name: String, iteration: usize },
}

impl Error {
    /// Convenience constructor tying an `io::Error` to the path it hit.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
