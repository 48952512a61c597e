use std::path::PathBuf;

/// Errors of the IO layer and the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ddsp_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: hash mismatch, manifest records {expected}, file has {actual}")]
    HashMismatch { path: PathBuf, expected: String, actual: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("index {index} out of range, dataset has items 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("checkpoint architecture {found} does not match expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 2 for usage and validation problems, 1 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        use ddsp_core::Error as C;
        match self {
            Error::Usage(_) | Error::OutOfRange { .. } => 2,
            Error::Core(
                C::InvalidConfig(_)
                | C::InvalidParams(_)
                | C::UnknownSelector(_)
                | C::UnstableFilter { .. }
                | C::SampleRateMismatch(..)
                | C::LengthMismatch(..)
                | C::SignalTooShort { .. },
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
