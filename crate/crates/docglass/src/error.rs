use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch inside the compute graph.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented contract was violated (fully masked key axis, backward on
    /// a non-scalar, and so on).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent corpus data.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Malformed checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss stopped being finite.
    #[error("training diverged at epoch {epoch}: last finite loss {last_finite_loss}")]
    Diverged { epoch: usize, last_finite_loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
