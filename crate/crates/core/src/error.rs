//! Crate-wide error type.

/// Errors produced by the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor was constructed with, or an operation received, an invalid shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Operand shapes are individually valid but mutually inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed text input (MHD header, CSV, config file).
    #[error("parse error: {0}")]
    Parse(String),

    /// Malformed numeric/file input at a known line.
    #[error("parse error at line {line}: {msg}")]
    ParseAt { line: usize, msg: String },

    /// Invalid runtime input (out-of-bounds coordinate, undersized volume, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric is undefined on the given data (e.g. no positive labels).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint file is malformed or belongs to the wrong stage.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The phantom generator could not satisfy its placement constraints.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
