//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector length did not match what the model spec requires.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Rejected input that is structurally invalid (empty batch, k out of
    /// range, malformed spec, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A sample produced a non-finite loss or gradient.
    #[error("degenerate sample {sample_id}: {reason}")]
    DegenerateSample { sample_id: u64, reason: String },

    /// The anchor set's mean gradient vanished.
    #[error("anchor collapse: mean anchor gradient has norm {norm:e}")]
    AnchorCollapse { norm: f64 },

    /// A parameter update produced non-finite values.
    #[error("training divergence: {0}")]
    TrainingDivergence(String),

    /// The policy network produced non-finite logits.
    #[error("policy divergence: {0}")]
    PolicyDivergence(String),

    /// A policy optimization pass produced non-finite quantities.
    #[error("optimization divergence in episode {episode}: {reason}")]
    OptimizationDivergence { episode: usize, reason: String },

    /// Batch assembly had no candidates at all.
    #[error("empty batch: no orthogonal or replay candidates available")]
    EmptyBatch,

    /// Rank correlation is undefined (constant input).
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// Configuration file problems, reported with key paths where known.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed serialized artifact (CSV / JSON read-back).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
