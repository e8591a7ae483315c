//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Error`]. The variants are
//! grouped by subsystem so callers (in particular the CLI) can map them onto
//! exit codes without string matching.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- autodiff ----
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (overflow or invalid input is an error, not silent)")]
    NonFinite { op: &'static str },

    #[error("tape is frozen after backward(); recording `{op}` is an error")]
    FrozenTape { op: &'static str },

    #[error("tensor belongs to a different tape (node recorded on tape {found}, expected {expected})")]
    TapeMismatch { expected: u64, found: u64 },

    #[error("backward() requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward() already called on this tape")]
    BackwardTwice,

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {threshold:.1e}")]
    GradCheckFailed { max_rel_err: f64, threshold: f64 },

    // ---- model construction / evaluation ----
    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("estimator `{estimator}` does not apply to a model with {latent} latent")]
    EstimatorMismatch { estimator: String, latent: String },

    #[error("candidate budget K={k} exceeds the enumerable code space of size {space}")]
    CandidateBudget { k: usize, space: usize },

    // ---- data ----
    #[error("data error: {0}")]
    Data(String),

    #[error("csv parse error at row {row}, column {col}: {detail}")]
    CsvParse { row: usize, col: usize, detail: String },

    // ---- training ----
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    // ---- oracle ----
    #[error("oracle error: {0}")]
    Oracle(String),

    // ---- checkpoint ----
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
