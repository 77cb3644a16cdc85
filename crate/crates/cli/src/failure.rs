//! Mapping from errors to process exit codes.

use std::fmt;

use fastscan_core::Error;

/// Exit code for a failed property or gradient check.
pub const EXIT_PROPERTY: u8 = 1;
/// Exit code for missing, unreadable or corrupt files.
pub const EXIT_IO: u8 = 2;
/// Exit code for invalid configurations, usage errors and manifest mismatches.
pub const EXIT_CONFIG: u8 = 3;

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format(_) => EXIT_IO,
            Error::Json(j) if j.is_syntax() || j.is_eof() || j.is_io() => EXIT_IO,
            Error::Json(_) | Error::Config(_) | Error::Manifest(_) | Error::Shape(_) | Error::Domain(_) => {
                EXIT_CONFIG
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

/// Writes `text` to `path`, mapping failures to the I/O exit code.
pub fn write_file(path: &std::path::Path, text: &str) -> CmdResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}
