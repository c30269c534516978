use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("module error for region {region}: {message}")]
    Module { region: String, message: String },

    #[error("module extraction failed:\n{}", .0.join("\n"))]
    Extraction(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("could not parse model answer: {0:?}")]
    AnswerParse(String),

    #[error("module selection failed: {0}")]
    Selection(String),

    #[error("estimation aborted: {0}")]
    Estimation(String),

    #[error("metric undefined: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Transport failures are the only ones a checkpointed run can resume from.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Backend(_))
    }
}
