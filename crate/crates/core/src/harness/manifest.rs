use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<OutputChecksum>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Checksums every listed file in `dir`, in the given order.
    pub fn build(config_hash: String, started: u64, dir: &Path, files: &[String]) -> Result<Self> {
        let mut outputs = Vec::with_capacity(files.len());
        for f in files {
            outputs.push(OutputChecksum {
                file: f.clone(),
                sha256: sha256_hex(&fs::read(dir.join(f))?),
            });
        }
        Ok(Self {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started,
            finished: unix_now(),
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
