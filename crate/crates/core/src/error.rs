use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (zero tokens, layer out of
    /// range, out-of-order recording, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data (profile, trace, map, config) failed validation.
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    /// A text or JSON-lines file failed to parse.
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    /// A lookup fell outside the grid bounds of a profiled map.
    #[error("lookup out of range on {axis} axis: {value} exceeds bound {bound}")]
    OutOfRange {
        axis: &'static str,
        value: u64,
        bound: u64,
    },

    /// A map was profiled for different model/gpu profiles.
    #[error("profile hash mismatch: map has {found}, profiles hash to {expected}")]
    ProfileMismatch { expected: String, found: String },

    /// Two reports describe different traces and were not declared unpaired.
    #[error("trace mismatch: {0} vs {1}")]
    TraceMismatch(String, String),

    /// An internal simulation invariant was breached. Always a bug signal.
    #[error("invariant breach at t={time:.6}s during {event}: {detail}")]
    InvariantBreach {
        time: f64,
        event: String,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
