use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written by every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: Option<u64>,
    pub parameters: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Digest of every regular file below `dir`, keyed by path, in sorted order.
pub fn dir_digests(dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            dir_digests(&p, out)?;
        } else {
            out.insert(p.display().to_string(), file_digest(&p)?);
        }
    }
    Ok(())
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, parameters: impl Serialize, master_seed: Option<u64>, started_unix_s: u64) -> Result<Self> {
        let parameters = serde_json::to_value(parameters)?;
        let config_hash = sha256_hex(serde_json::to_string(&parameters)?.as_bytes());
        let versions = BTreeMap::from([
            ("time-drs-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("time-drs-core".to_string(), time_drs::VERSION.to_string()),
        ]);
        Ok(RunManifest {
            command: command.to_string(),
            config_hash,
            master_seed,
            parameters,
            inputs: BTreeMap::new(),
            versions,
            started_unix_s,
            finished_unix_s: started_unix_s,
            details: None,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            dir_digests(path, &mut self.inputs)
        } else {
            self.inputs.insert(path.display().to_string(), file_digest(path)?);
            Ok(())
        }
    }

    pub fn write(mut self, path: &Path) -> Result<()> {
        self.finished_unix_s = now_unix();
        let text = serde_json::to_string_pretty(&self)? + "\n";
        time_drs::data::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}
