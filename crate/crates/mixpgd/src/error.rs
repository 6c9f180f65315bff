use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("audio error for example '{id}': {msg}")]
    Audio { id: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("CTC infeasible for example {index}: label length {label_len} exceeds output frames {out_len}")]
    CtcInfeasible {
        index: usize,
        label_len: usize,
        out_len: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at batch {batch_id}: {msg}")]
    Diverged { batch_id: String, msg: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
