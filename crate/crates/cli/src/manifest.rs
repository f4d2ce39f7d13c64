//! Run manifests: enough provenance (command, config hash, input hashes,
//! seed, version, timestamps) to reproduce any command's output.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub timestamps: Timestamps,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Hash a file, or every file of a directory (sorted, names mixed in).
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .with_context(|| format!("hashing input dir {}", path.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        let mut hasher = Sha256::new();
        for entry in entries {
            let p = entry.path();
            if p.is_file() {
                hasher.update(p.file_name().unwrap().to_string_lossy().as_bytes());
                hasher.update(std::fs::read(&p)?);
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    } else {
        hash_file(path)
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    seed: u64,
    started: u64,
}

impl ManifestBuilder {
    pub fn new(command: impl Into<String>, config_json: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: sha256_hex(config_json.as_bytes()),
            inputs: BTreeMap::new(),
            seed,
            started: now_unix(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    /// Write the manifest next to the command's output: as
    /// `run_manifest.json` inside a directory output, or `<out>.manifest.json`
    /// beside a file output.
    pub fn write(self, out: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            input_hashes: self.inputs,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamps: Timestamps {
                started_unix: self.started,
                finished_unix: now_unix(),
            },
        };
        let target = if out.is_dir() {
            out.join("run_manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&target, json)
            .with_context(|| format!("writing manifest {}", target.display()))?;
        Ok(())
    }
}
