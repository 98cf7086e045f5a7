//! Run manifests written beside every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run. The worker thread count is left out
/// on purpose: outputs do not depend on it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<InputRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

impl RunManifest {
    pub fn new(command: &str, args: Value, seed: u64, inputs: &[&Path], outputs: Vec<PathBuf>) -> Result<Self> {
        let hashed = serde_json::to_vec(&serde_json::json!({ "command": command, "args": args, "seed": seed }))?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: sha256_hex(&hashed),
            args,
            seed,
            inputs: inputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
