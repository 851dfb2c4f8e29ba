use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("checkpoint parameter set mismatch: missing {missing:?}, extra {extra:?}")]
    NameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("batch has no {0} samples")]
    EmptyClass(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("loss became non-finite at step {step}; last finite step: {last_finite:?}")]
    Diverged {
        step: usize,
        last_finite: Option<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data integrity, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Protocol(_) | Error::Shape { .. } => 1,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::NameMismatch { .. }
            | Error::Io { .. } => 2,
            Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::Metric(_)
            | Error::Oracle(_)
            | Error::EmptyClass(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
