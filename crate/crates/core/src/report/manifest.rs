//! Run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!("symlab ", env!("CARGO_PKG_VERSION"));

/// Pretty-printed JSON with object keys sorted, newline-terminated.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v: Value = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub analysis: String,
    /// Effective configuration, path keys absolute.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Hash of the analysed model's serialized checkpoint.
    pub checkpoint_sha256: Option<String>,
    /// Sorted by path.
    pub outputs: Vec<OutputFile>,
    /// Headline numbers, also written to `summary.json`.
    pub summary: BTreeMap<String, Value>,
    pub tool_version: String,
    /// RFC 3339 UTC start time.
    pub started_at: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), to_sorted_json(self)?)?;
        Ok(())
    }

    /// Problems found re-hashing the outputs under `dir`; empty when every
    /// listed file exists with the recorded hash.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for o in &self.outputs {
            match std::fs::read(dir.join(&o.path)) {
                Ok(bytes) if sha256_hex(&bytes) == o.sha256 => {}
                Ok(_) => problems.push(format!("{}: hash mismatch", o.path)),
                Err(e) => problems.push(format!("{}: {e}", o.path)),
            }
        }
        problems
    }
}

pub fn describe_output(dir: &Path, rel: &str) -> Result<OutputFile> {
    let bytes = std::fs::read(dir.join(rel))?;
    Ok(OutputFile { path: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}
