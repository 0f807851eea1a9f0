//! Writes run artifacts, `summary.json` and `manifest.json` to disk.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::runner::RunOutcome;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const MANIFEST_FORMAT: u32 = 1;

/// SHA-256 over `blob <len>\0<bytes>`, the object hashing scheme of git.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("json values serialize");
    out.push(b'\n');
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
}

/// Writes every data file, then the summary, then the manifest listing all
/// of them. Returns the manifest.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<Value, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let summary = pretty(&outcome.summary());
    let mut listed: Vec<(&str, &[u8])> = outcome
        .artifacts
        .files
        .iter()
        .map(|(n, b)| (n.as_str(), b.as_slice()))
        .collect();
    listed.push((SUMMARY, &summary));
    listed.sort_by(|a, b| a.0.cmp(b.0));
    for (name, bytes) in &listed {
        write(dir, name, bytes)?;
    }

    let config = serde_json::to_value(cfg).expect("configs serialize");
    let canonical = serde_json::to_vec(&config).expect("json values serialize");
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "config": config,
        "config_hash": content_hash(&canonical),
        "versions": {
            "dln_core": dln_core::VERSION,
            "dln_cli": env!("CARGO_PKG_VERSION"),
        },
        "status": if outcome.error.is_none() { "ok" } else { "error" },
        "files": listed
            .iter()
            .map(|(name, bytes)| json!({"path": name, "bytes": bytes.len(), "sha256": content_hash(bytes)}))
            .collect::<Vec<_>>(),
    });
    write(dir, MANIFEST, &pretty(&manifest))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_object_scheme() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
