use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    RawIo(#[from] std::io::Error),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("line {line}: malformed record: {message}")]
    Format { line: usize, message: String },
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("line {line}: corrupt record: {message}")]
    CorruptRecord { line: usize, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("layout does not match image: {0}")]
    Binding(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("backend refused the request: {0}")]
    Capability(String),
    #[error("validation failed: {}", checks.join(", "))]
    Validation { checks: Vec<String> },
    #[error("item {item_id} is {status}, not pending")]
    State { item_id: String, status: String },
    #[error("conflicting verdict for item {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("predictions reference unknown sample ids: {}", missing.join(", "))]
    Join { missing: Vec<String> },
    #[error("unknown field `{0}` (not in the field-type table)")]
    UnknownField(String),
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    InputFormat,
    Backend,
    Validation,
    Other,
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// Attaches the file the error was found in.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            other => Error::InFile {
                path: path.to_owned(),
                source: Box::new(other),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InFile { source, .. } => source.class(),
            Error::Config(_) => ErrorClass::Config,
            Error::Format { .. }
            | Error::Record { .. }
            | Error::CorruptRecord { .. }
            | Error::Image(_) => ErrorClass::InputFormat,
            Error::BackendUnavailable { .. } | Error::Capability(_) => ErrorClass::Backend,
            Error::Validation { .. }
            | Error::Parameter(_)
            | Error::Binding(_)
            | Error::State { .. }
            | Error::Conflict(_)
            | Error::Join { .. }
            | Error::UnknownField(_) => ErrorClass::Validation,
            Error::Io { .. } | Error::RawIo(_) | Error::NotFound(_) => ErrorClass::Other,
        }
    }

    /// Strips [`Error::InFile`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            other => other,
        }
    }
}
