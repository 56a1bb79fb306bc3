use std::fmt;
use std::process::ExitCode;

use pilrecon_core::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Missing, unreadable, malformed or mutually inconsistent inputs (exit 3).
    Io(String),
    /// Training hit a non-finite value (exit 4).
    Numeric(String),
    /// Some maps of a batch failed (exit 5).
    Batch(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Batch(_) => 5,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Io(m) => write!(f, "input/output error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric abort: {m}"),
            Failure::Batch(m) => write!(f, "batch incomplete: {m}"),
        }
    }
}

fn class(e: &Error) -> fn(String) -> Failure {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Size(_) => Failure::Io,
        Error::Numeric(_) => Failure::Numeric,
        Error::Member { source, .. } => class(source),
        Error::OutOfRange { .. } | Error::Domain(_) | Error::Config(_) => Failure::Usage,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        class(&e)(e.to_string())
    }
}
