//! Run manifests: every command writes a manifest capturing the tool
//! version, the resolved parameters, and SHA-256 digests of its inputs.
//! Re-running a command from its manifest reproduces the primary outputs
//! byte for byte (manifests themselves carry no timestamps).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Resolved parameter map, config-file syntax: key=value.
    pub params: BTreeMap<String, String>,
    /// Input path -> sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    /// Primary output files, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed,
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(self)
    }

    pub fn output(&mut self, rel: &str) -> &mut Self {
        self.outputs.push(rel.to_string());
        self
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join("manifest.json");
        crate::io::save_json(self, &path)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        crate::io::load_json(path).map_err(|e| {
            CliError::new(
                "report",
                "REPORT_CORRUPT_MANIFEST",
                format!("{}: {}", path.display(), e.message),
            )
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "hello").unwrap();
        let mut m = RunManifest::new("synth", 42);
        m.param("n_per_style", 300).param("noise_rate", 0.0);
        m.input(&input).unwrap();
        m.output("formal.jsonl");
        let path = m.write(dir.path()).unwrap();
        let loaded = RunManifest::read(&path).unwrap();
        assert_eq!(loaded.command, "synth");
        assert_eq!(loaded.params.get("n_per_style").unwrap(), "300");
        assert_eq!(
            loaded.inputs.get(&input.display().to_string()).unwrap(),
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824",
            "sha256 of 'hello'"
        );
    }

    #[test]
    fn corrupt_manifest_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = RunManifest::read(&path).unwrap_err();
        assert_eq!(err.code, "REPORT_CORRUPT_MANIFEST");
        assert!(err.message.contains("manifest.json"));
    }
}
