//! The external auditor backend: a subprocess bridge that preserves the
//! paper-style wire contract. The configured command receives the full
//! auditor request (fixed prompt plus the email) on stdin and must answer
//! with a `DECEPTION: Yes|No` line followed by a `RATIONALE:` line on
//! stdout. Pointing it at a small script that calls a hosted LLM plugs a
//! real model into the audit without touching this tool.

use std::io::Write;
use std::process::{Command, Stdio};

use phishscope_core::audit::{auditor_request, parse_auditor_reply, AuditorBackend, Verdict};
use phishscope_core::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub command: String,
    pub args: Vec<String>,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>) -> ExternalBackend {
        ExternalBackend {
            command: command.into(),
            args: Vec::new(),
        }
    }
}

impl AuditorBackend for ExternalBackend {
    fn audit(&self, text: &str) -> Result<Verdict> {
        let request = auditor_request(text);
        let unreachable = |why: String| {
            Error::new(
                "audit",
                "AUDIT_BACKEND_UNREACHABLE",
                format!("external auditor '{}': {why}", self.command),
            )
        };
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| unreachable(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(request.as_bytes())
            .map_err(|e| unreachable(e.to_string()))?;
        let output = child
            .wait_with_output()
            .map_err(|e| unreachable(e.to_string()))?;
        if !output.status.success() {
            return Err(unreachable(format!("exited with {}", output.status)));
        }
        let reply = String::from_utf8_lossy(&output.stdout);
        parse_auditor_reply(&reply)
    }

    fn describe(&self) -> String {
        format!("external ({})", self.command)
    }
}
