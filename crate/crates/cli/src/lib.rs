//! File formats, run manifests, and the workflow layer behind the
//! `phishscope` binary. The pure algorithms live in `phishscope-core`;
//! this crate adds everything that touches the filesystem or the clock.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod external;
pub mod io;
pub mod manifest;
pub mod parallel;

use std::fmt;

/// Error surfaced to the user as `{code, module, message, context}` JSON.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CliError {
    pub code: String,
    pub module: String,
    pub message: String,
    pub context: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}:{}] {} ({})", self.module, self.code, self.message, self.context)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(
        module: impl Into<String>,
        code: impl Into<String>,
        message: impl Into<String>,
    ) -> CliError {
        CliError {
            code: code.into(),
            module: module.into(),
            message: message.into(),
            context: String::new(),
        }
    }

    pub fn io(message: impl Into<String>) -> CliError {
        CliError::new("cli", "CLI_IO", message)
    }

    pub fn with_context(mut self, context: impl Into<String>) -> CliError {
        self.context = context.into();
        self
    }
}

impl From<phishscope_core::error::Error> for CliError {
    fn from(e: phishscope_core::error::Error) -> CliError {
        CliError::new(e.module, e.code, e.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::new("cli", "CLI_JSON", e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
