use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The quality vector is constant, so the congestion coefficient is not
    /// identifiable.
    #[error("degenerate quality vector: spread {spread:e} is zero")]
    DegenerateQuality { spread: f64 },

    /// An iterative solver ran out of iterations. `best` is the last iterate
    /// (for multi-type solves, the aggregate load).
    #[error("solver did not converge after {iterations} iterations (residual {residual:e}){}", detail_suffix(.detail))]
    NonConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
        detail: Option<String>,
    },

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("pipeline failed: every checkpoint errored ({0})")]
    PipelineFailed(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("table I/O: {0}")]
    Csv(#[from] csv::Error),
}

fn detail_suffix(detail: &Option<String>) -> String {
    detail
        .as_ref()
        .map(|d| format!(": {d}"))
        .unwrap_or_default()
}

/// Parse failures for the MOER trace format. Every variant names the header
/// field (or payload region) at fault and the byte offset where it starts.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("bad magic at byte 0: expected \"MOER\", found \"{}\"", found.escape_ascii())]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found} at byte 4 (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated {field} at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        field: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("inconsistent {field} at byte {offset}: {reason}")]
    Inconsistent {
        field: &'static str,
        offset: usize,
        reason: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
