//! Run manifests: one append-only JSON line per command invocation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MasnError, Result};

/// Environment variable selecting where manifests and default outputs go.
pub const OUT_ROOT_ENV: &str = "MASN_OUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn manifest_path() -> PathBuf {
    output_root().join("manifests.jsonl")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the fully resolved configuration JSON.
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn begin(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config_hash: config_hash(config)?,
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
            metrics: serde_json::Value::Null,
        })
    }

    pub fn finish(mut self, outputs: Vec<String>, metrics: serde_json::Value) -> Self {
        self.finished_unix = unix_now();
        self.outputs = outputs;
        self.metrics = metrics;
        self
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Hash of the canonical (serde-ordered) JSON encoding of a config.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Append one manifest line to `<out_root>/manifests.jsonl`.
pub fn append_manifest(manifest: &RunManifest) -> Result<PathBuf> {
    let path = manifest_path();
    append_manifest_to(&path, manifest)?;
    Ok(path)
}

pub fn append_manifest_to(path: &Path, manifest: &RunManifest) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MasnError::io(dir.display().to_string(), e))?;
    }
    let mut line = serde_json::to_vec(manifest)?;
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MasnError::io(path.display().to_string(), e))?;
    file.write_all(&line)
        .map_err(|e| MasnError::io(path.display().to_string(), e))?;
    Ok(())
}
