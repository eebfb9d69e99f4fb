//! Module-qualified errors with stable machine-readable codes.
//!
//! The CLI surfaces failures as `{code, module, message, context}` JSON, so
//! every error carries a code that tools can match on without parsing prose.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Error {
    /// Originating module, e.g. "corpus" or "explain".
    pub module: &'static str,
    /// Stable code, e.g. "EXPLAIN_N_TOO_LARGE".
    pub code: &'static str,
    pub message: String,
}

impl Error {
    pub fn new(module: &'static str, code: &'static str, message: impl Into<String>) -> Self {
        Error {
            module,
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}:{}] {}", self.module, self.code, self.message)
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_includes_module_and_code() {
        let e = Error::new("explain", "EXPLAIN_N_TOO_LARGE", "n=13 exceeds the exact cap of 12");
        let s = alloc::format!("{e}");
        assert!(s.contains("explain"));
        assert!(s.contains("EXPLAIN_N_TOO_LARGE"));
    }
}
