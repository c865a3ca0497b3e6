use std::fmt;
use std::io;
use std::process::ExitCode;

use mole::lut_store::LutError;
use mole::Error;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass (exit 1).
    Failed(String),
    /// Bad flags, config or inputs that do not fit together (exit 2).
    Usage(String),
    /// Files that cannot be read, written or parsed (exit 3).
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "failed: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Lut(
                LutError::InvalidBlockSize { .. } | LutError::UnsupportedBits(_) | LutError::InconsistentTables(_),
            ) => CliError::Usage(e.to_string()),
            Error::Io(_) | Error::Lut(_) | Error::Checkpoint(_) => CliError::Io(e.to_string()),
            Error::NonFinite(_) => CliError::Failed(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Attaches the path to errors from a library call that touched a file.
pub trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> WithPath<T> for Result<T, Error> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| match CliError::from(e) {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl<T> WithPath<T> for Result<T, io::Error> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
