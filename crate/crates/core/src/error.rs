use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular design matrix: column `{column}` is collinear with earlier columns")]
    Singular { column: String },

    #[error("insufficient degrees of freedom: {n} observations for {params} parameters")]
    Dof { n: usize, params: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training accuracy {accuracy:.4} is below the gate {gate}")]
    AccuracyGate { accuracy: f64, gate: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from numerics rather than from bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Singular { .. } | Error::Diverged { .. } | Error::AccuracyGate { .. } => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
