//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was applied to tensors with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Backward was called on a tape that has already been swept.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// The backward seed does not match the output shape.
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Manifest or sidecar parsing failure; `row` counts data rows from 1.
    #[error("{msg} at row {row}")]
    Manifest { row: usize, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Sampler(String),

    /// A non-finite value surfaced where the pipeline requires finite math.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
