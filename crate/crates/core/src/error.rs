use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Image bytes that do not follow the expected container format.
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    /// A manifest or annotation rule was violated. `line` is 1-based when
    /// the record came from a JSON Lines file.
    #[error("{}validation error in `{field}`: {rule}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation {
        line: Option<usize>,
        field: String,
        rule: String,
    },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch} (alpha = {alpha}): {detail}")]
    Training {
        epoch: usize,
        alpha: f64,
        detail: String,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Validation {
            line: None,
            field: field.into(),
            rule: rule.into(),
        }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        match self {
            Error::Validation { field, rule, .. } => Error::Validation {
                line: Some(line),
                field,
                rule,
            },
            other => other,
        }
    }
}
