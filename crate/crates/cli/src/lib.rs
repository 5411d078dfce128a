//! Library half of the `nnmpc` binary: run manifests, the five pipeline
//! commands, and the exit-code policy. Kept as a library so integration
//! tests can drive commands in-process and parse what they wrote.
//!
//! Every command reads one TOML config (the single source of truth for
//! seeds, grids, and paths), does its work, and writes two files into the
//! reports directory: a deterministic manifest (`manifest-<command>.toml`)
//! whose bytes depend only on the config and the input files, and a wall-time
//! sidecar (`wall-<command>.toml`) that is excluded from any determinism
//! comparison. Downstream commands re-open the upstream manifest and refuse
//! to run against files whose hashes no longer match it.

pub mod commands;
pub mod manifest;

use nnmpc_core::Error;

/// Command-level error: either a library error or a cross-stage invariant
/// failure detected by the pipeline itself (verification conditions, audit
/// mismatches, a broken hash chain, budget parity).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("invariant violation: {0}")]
    Violation(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit code policy: 0 ok, 2 validation, 3 invariant violation,
/// 4 I/O. Argument errors also exit 2 (clap's default).
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Violation(_) => 3,
        CliError::Core(c) => match c {
            Error::Io(_) | Error::Format(_) => 4,
            Error::Solver(_) | Error::MetricMismatch | Error::Diverged { .. } => 3,
            _ => 2,
        },
    }
}
