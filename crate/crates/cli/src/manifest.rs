//! JSON run manifests: enough to re-run a command exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smmf_core::synthvid::MANIFEST_FILE;

use crate::config::{hex, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    /// Digest of the file, or of a dataset directory's manifest.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration, defaults included.
    pub config: std::collections::BTreeMap<String, String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_time_s: f64,
    /// Command-specific results (scores, losses, ...).
    pub results: serde_json::Value,
}

pub fn digest(path: &Path) -> Option<String> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    fs::read(file).ok().map(|b| hex(&Sha256::digest(&b)))
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, argv: Vec<String>, threads: usize) -> Self {
        Self {
            tool: "smmf".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cfg.command.clone(),
            argv,
            config: cfg.values.clone(),
            config_hash: cfg.hash(),
            seeds: cfg.u64("seed").into_iter().collect(),
            inputs: cfg
                .inputs()
                .into_iter()
                .map(|p| InputDigest {
                    sha256: digest(&p),
                    path: p.display().to_string(),
                })
                .collect(),
            outputs: Vec::new(),
            threads,
            wall_time_s: 0.0,
            results: serde_json::Value::Null,
        }
    }

    /// Where the manifest of a run writing to `out` goes: inside output
    /// directories, next to output files.
    pub fn location(out: &Path, out_is_dir: bool) -> PathBuf {
        if out_is_dir {
            out.join("run.json")
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(".run.json");
            PathBuf::from(s)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| smmf_core::Error::Format(format!("run manifest: {e}")).into())
    }

    /// Configuration pairs that reproduce this run.
    pub fn overrides(&self) -> Vec<(String, String)> {
        self.config.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
