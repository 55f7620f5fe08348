use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { op: String, step: Option<usize> },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {path}: line {line}{}: {detail}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: usize,
        col: Option<usize>,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach an integration step index to a numeric error that lacks one.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { op, step: None } => Error::Numeric {
                op,
                step: Some(step),
            },
            other => other,
        }
    }

    /// Coarse error category, used by the command-line front end to pick exit codes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parse { .. } | Error::Io { .. }
        )
    }
}
