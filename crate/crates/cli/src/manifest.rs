//! JSON record written once per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use predlab::config::KeyValues;
use serde::Serialize;

use crate::settings::config_hash;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub exit_code: u8,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &str, config: &KeyValues, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: config
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            config_hash: config_hash(config),
            seed,
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
            exit_code: 0,
            error: None,
            artifacts: Vec::new(),
        }
    }

    pub fn write(&mut self, path: &Path) -> std::io::Result<()> {
        self.finished_unix_ms = unix_ms();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n")
    }
}
