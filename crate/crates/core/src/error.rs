use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed bracketed parse. `offset` is a byte offset into the input.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Bad or inconsistent input data (corpus, labels, embeddings, artifacts).
    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifact `{}`; run the `{stage}` stage first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("fingerprint mismatch in `{}`: artifact has {found}, config gives {expected}", path.display())]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = usage/config, 2 = data, 3 = internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::FingerprintMismatch { .. } => 1,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::MissingArtifact { .. }
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Shape(_) | Error::Invariant(_) => 3,
        }
    }
}
