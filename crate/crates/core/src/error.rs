use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input contained NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A dimension disagreed with what the operation requires.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Parameters outside their admissible range (non-PD matrix, negative
    /// weight, empty horizon, ...).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// An empty dataset where at least one record is required.
    #[error("empty dataset")]
    EmptyDataset,

    /// Insulin/CGM history too short or with gaps for the requested window.
    #[error("history error: {0}")]
    History(String),

    /// QP solver failed (infeasible problem or iteration budget exhausted
    /// where the caller demanded convergence).
    #[error("solver: {0}")]
    Solver(String),

    /// Covariance estimation failed (rank-deficient or too few samples).
    #[error("state metric: {0}")]
    Metric(String),

    /// A query was issued against an index built with different metric
    /// parameters.
    #[error("metric params mismatch: index built with different cost parameters")]
    MetricMismatch,

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    /// Malformed binary file (bad magic, truncated, wrong version...).
    #[error("file format: {0}")]
    Format(String),

    /// Configuration file rejected by schema or semantic validation.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
