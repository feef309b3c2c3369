use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data: bad file layout, dimension mismatch, bad rows.
    #[error("format error{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { message: String, offset: Option<u64> },

    /// An operation's mathematical precondition does not hold.
    #[error("domain error: {0}")]
    Domain(String),

    /// Manifest or configuration problem (missing file, bad field).
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wraps an error raised inside a named pipeline stage.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            offset: None,
        }
    }

    pub(crate) fn format_at(message: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            message: message.into(),
            offset: Some(offset),
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn manifest(message: impl Into<String>) -> Self {
        Error::Manifest(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config/manifest, 3 data/format, 4 domain.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Manifest(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::Domain(_) => 4,
            Error::Stage { .. } => unreachable!("root() strips stage tags"),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::format(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::format(format!("json: {e}"))
    }
}
