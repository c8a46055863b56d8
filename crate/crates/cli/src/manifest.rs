use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance of one CLI run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub inputs: Vec<InputRecord>,
    pub config: BTreeMap<String, serde_json::Value>,
    /// Wall-clock seconds per phase.
    pub timing: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    #[serde(skip)]
    started: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: Vec::new(),
            config: BTreeMap::new(),
            timing: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Records and hashes an input file.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|source| heatnet::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.push(InputRecord {
            role: role.into(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn config(&mut self, key: &str, value: &impl Serialize) {
        let v = serde_json::to_value(value).expect("config values serialize");
        self.config.insert(key.into(), v);
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        *self.timing.entry(phase.into()).or_default() += seconds;
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()));
    }

    /// Writes the manifest to `path`, adding the total run time.
    pub fn write(mut self, path: &Path) -> Result<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.timing.insert("total".into(), total);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
