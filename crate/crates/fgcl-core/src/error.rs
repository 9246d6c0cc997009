//! Error type shared across the crate.
//!
//! Contract violations (bad shapes, empty inputs, out-of-range arguments) and
//! numeric failures (non-finite values, singular systems) are reported through
//! [`FgclError`] rather than panics, so batch jobs can skip or abort cleanly.

pub type Result<T> = std::result::Result<T, FgclError>;

#[derive(Debug, thiserror::Error)]
pub enum FgclError {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric failure in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    /// A linear system could not be solved even after ridge escalation.
    #[error("singular system: {0}")]
    Singular(String),

    /// An operation received no usable data.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// An artifact on disk does not match the expected schema.
    #[error("schema error in {path}: {detail}")]
    Schema { path: String, detail: String },

    /// I/O failure, always carrying the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure, carrying the offending path.
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl FgclError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FgclError::Contract(msg.into())
    }

    pub fn empty_input(msg: impl Into<String>) -> Self {
        FgclError::EmptyInput(msg.into())
    }

    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        FgclError::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FgclError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        FgclError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<String>, detail: impl Into<String>) -> Self {
        FgclError::Schema {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

/// Shorthand for returning a [`FgclError::Contract`] unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::FgclError::Contract(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
