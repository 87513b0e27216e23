use std::path::PathBuf;

/// Every failure the library can report.
///
/// The variants line up with the process exit codes used by the command-line
/// front end, see [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len}) in {context}")]
    Index {
        index: usize,
        len: usize,
        context: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric fault: non-finite gradient in parameter `{0}`")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Stable process exit code: 2 I/O, 3 format, 4 config, 5 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Format { .. } => 3,
            Error::Integrity(_) => 5,
            _ => 4,
        }
    }
}
