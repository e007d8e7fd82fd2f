//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A class or element index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A model specification violates a structural invariant.
    #[error("invalid model spec: {0}")]
    Spec(String),

    /// A batch sampler could not satisfy the requested distribution.
    #[error("sampling failed: {0}")]
    Sampling(String),

    /// The requested gradient is not shared under the threat model.
    #[error("policy violation: {0}")]
    Policy(String),

    /// Feature or probability estimation failed.
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// A caller-facing contract (e.g. matching count sums) was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A binary dataset file is malformed.
    #[error("bad file format: {0}")]
    Format(String),

    /// An experiment configuration is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
