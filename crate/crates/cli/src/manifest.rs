//! Run manifests: config hash, seed and artifact checksums.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Path relative to the manifest directory -> sha256.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `dir/manifest.json` covering `artifacts` (relative to `dir`).
pub fn write_manifest(dir: &Path, command: &str, config_hash: &str, seed: u64, artifacts: &[&str]) -> Result<Manifest> {
    let mut map = BTreeMap::new();
    for a in artifacts {
        map.insert(a.to_string(), sha256_file(&dir.join(a))?);
    }
    let m = Manifest {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        artifacts: map,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .with_context(|| format!("reading manifest in {}", dir.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// True when `dir` holds a manifest with `hash` whose artifacts still match.
pub fn manifest_matches(dir: &Path, hash: &str) -> bool {
    let Ok(m) = read_manifest(dir) else { return false };
    m.config_hash == hash
        && m
            .artifacts
            .iter()
            .all(|(a, sum)| sha256_file(&dir.join(a)).is_ok_and(|s| &s == sum))
}
