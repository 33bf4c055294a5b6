use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("manifest has no items")]
    EmptyManifest,

    #[error("subject {subject} already has an active session {session} with a different seed")]
    DuplicateActiveSession { subject: String, session: String },

    #[error("no session {0}")]
    UnknownSession(String),

    #[error("session {0} is complete")]
    SessionComplete(String),

    #[error("session {session} is at item {current}, not {submitted}")]
    StaleItem {
        session: String,
        current: String,
        submitted: String,
    },

    #[error("{0}")]
    Validation(String),

    #[error("missing or wrong bearer token")]
    Unauthorized,

    #[error("log record {lsn}: {message}")]
    Corrupt { lsn: u64, message: String },

    #[error("log line {line}: {source}")]
    BadRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AnnotateError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AnnotateError {
        let path = path.into();
        move |source| AnnotateError::Io { path, source }
    }

    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            AnnotateError::EmptyManifest => "empty-manifest",
            AnnotateError::DuplicateActiveSession { .. } => "duplicate-active-session",
            AnnotateError::UnknownSession(_) => "unknown-session",
            AnnotateError::SessionComplete(_) => "session-complete",
            AnnotateError::StaleItem { .. } => "stale-session",
            AnnotateError::Validation(_) => "validation",
            AnnotateError::Unauthorized => "unauthorized",
            AnnotateError::Corrupt { .. } | AnnotateError::BadRecord { .. } => "corrupt-log",
            AnnotateError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = AnnotateError> = std::result::Result<T, E>;
