//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor math, network plumbing, file IO and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A convolution geometry produces an empty output or is otherwise unusable.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A configuration value violates a documented constraint.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input is degenerate for the requested operation (empty set, zero range).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A serialized artifact has a bad magic number, version or truncated payload.
    #[error("malformed file: {0}")]
    Format(String),

    /// Internal state (an index map, a cached shape) is inconsistent.
    #[error("internal corruption: {0}")]
    Corrupt(String),

    /// A checkpoint does not match the network it is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; identifies where it happened.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: cls {cls}, loc {loc}")]
    NonFinite { epoch: usize, batch: usize, cls: f64, loc: f64 },

    /// Benchmark correctness gate failed: kernel variants disagree.
    #[error("kernel variants disagree: {0}")]
    VariantMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
