use std::fmt;

/// Broad classes of failure; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("format error at line {line}: {msg}")]
    FormatLine { line: usize, msg: String },
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Another error annotated with where it happened.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Error::Usage(msg.to_string())
    }

    pub fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    pub fn format(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            msg: msg.to_string(),
        }
    }

    pub fn context(self, context: impl fmt::Display) -> Self {
        Error::Context {
            context: context.to_string(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Context { source, .. } => source.kind(),
            Error::Usage(_) => ErrorKind::Usage,
            Error::Domain(_) | Error::Degenerate(_) | Error::Numerical { .. } => {
                ErrorKind::Numerical
            }
            Error::Format { .. } | Error::FormatLine { .. } | Error::Io(_) => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
