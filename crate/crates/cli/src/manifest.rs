use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::config_hash;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed_root: Option<u64>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    /// The merged configuration the hash was taken over.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed_root: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(&config),
            seed_root,
            started_at: unix_now(),
            finished_at: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            tuning: None,
        }
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`,
    /// replacing any earlier manifest there.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = unix_now();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}
