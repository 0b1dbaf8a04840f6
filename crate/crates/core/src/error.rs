use thiserror::Error;

/// Errors raised across the engine.
///
/// Variants are grouped by cause so that callers (and the CLI exit-code
/// mapping) can tell a bad argument from a numeric failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown label {label} (table has {size} entries)")]
    Label { label: usize, size: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value produced in {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("degenerate prototype for identity {0}: mean feature has zero norm")]
    DegeneratePrototype(usize),

    #[error("evaluation protocol violated: {0}")]
    Protocol(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("report error in {file}: {reason}")]
    Report { file: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the error stems from caller input rather than computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_) | Error::MissingInput(_) | Error::Label { .. } | Error::Protocol(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
