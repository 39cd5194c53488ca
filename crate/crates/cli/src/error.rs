use std::fmt;

use wda_core::WdaError;

pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_PARSE: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_PARSE,
            message: message.into(),
        }
    }

    /// Prefixes the message with where the failure happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<WdaError> for CliError {
    fn from(e: WdaError) -> Self {
        let code = match e {
            WdaError::Parameter(_) | WdaError::Dimension { .. } | WdaError::Domain(_) => EXIT_VALIDATION,
            WdaError::Parse { .. } | WdaError::Csv(_) => EXIT_PARSE,
            WdaError::Numeric(_) | WdaError::Invariant(_) => EXIT_NUMERIC,
            WdaError::Io(_) => EXIT_IO,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        let code = match e.classify() {
            // well-formed JSON with unknown keys or wrong types
            Category::Data => EXIT_VALIDATION,
            Category::Syntax | Category::Eof => EXIT_PARSE,
            Category::Io => EXIT_IO,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
