use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: malformed spec, shape mismatch, out-of-range value.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported family `{0}` for this operation")]
    UnsupportedFamily(String),
    #[error("unsupported preset: {0}")]
    UnsupportedPreset(String),
    /// An operation was called in the wrong order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the error stems from user input rather than a bug or the environment.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::UnsupportedFamily(_)
                | Error::UnsupportedPreset(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Diverged { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
