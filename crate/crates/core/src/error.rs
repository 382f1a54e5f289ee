use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: mismatched curvatures, slices out of range, invalid sizes.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value left the numerically valid domain (NaN/Inf, vanishing denominator).
    #[error("numerical-domain error in `{op}`: {detail}")]
    NumericalDomain { op: String, detail: String },

    /// Cosine requested for a zero-norm vector.
    #[error("degenerate angle: zero-norm tangent vector")]
    DegenerateAngle,

    /// Caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged; the last batch was written to `dump` when an output directory exists.
    #[error("training diverged at step {step}: {detail}{}", dump.as_ref().map(|p| format!(" (batch dump: {})", p.display())).unwrap_or_default())]
    Diverged {
        step: usize,
        detail: String,
        dump: Option<PathBuf>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv parse error at line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericalDomain {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
