//! Run manifests: config hash, version and a checksum for every artifact.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    /// File name relative to the run directory → hex SHA-256.
    pub checksums: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub config: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn build(dir: &Path, cfg: &ExperimentConfig, files: &[&str], duration: Duration) -> Result<Self> {
        let mut checksums = BTreeMap::new();
        for f in files {
            checksums.insert((*f).to_string(), file_checksum(&dir.join(f))?);
        }
        Ok(Self {
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            checksums,
            duration_secs: duration.as_secs_f64(),
            config: serde_json::to_value(cfg.canonical())?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n").context("writing manifest")
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes every listed checksum against the files on disk.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, expected) in &self.checksums {
            let actual = file_checksum(&dir.join(name))?;
            if &actual != expected {
                bail!("{name}: checksum {actual} does not match manifest {expected}");
            }
        }
        Ok(())
    }
}

/// Dotted paths at which two JSON documents differ.
pub fn json_diff_paths(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        use serde_json::Value;
        let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &join(k), out),
                        _ => out.push(join(k)),
                    }
                }
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
                for (i, (u, v)) in x.iter().zip(y).enumerate() {
                    walk(u, v, &join(&i.to_string()), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}
