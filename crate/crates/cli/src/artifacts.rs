use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

/// Provenance line written as the first `#` comment of every CSV.
pub fn stamp(config: &RunConfig) -> String {
    format!("epiforge={VERSION} config_hash={} seed={}", config.hash(), config.seed)
}

/// Collects CSV text with the stamp line first.
pub struct CsvOut {
    text: String,
}

impl CsvOut {
    pub fn new(stamp: &str, header: &[&str]) -> Self {
        Self {
            text: format!("# {stamp}\n{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Optional float as a CSV field; empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub stages: Vec<String>,
    /// Relative path → SHA-256 of every artifact in the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub updated_unix: u64,
}

fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, root, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub fn hash_artifacts(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(out, out, &mut files)?;
    let mut map = BTreeMap::new();
    for f in files {
        let key = f.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        map.insert(key, sha256_file(&out.join(&f))?);
    }
    Ok(map)
}

/// Rewrites the manifest after a stage, keeping earlier stage names.
pub fn update_manifest(out: &Path, config: &RunConfig, stage: &str) -> Result<()> {
    let path = out.join(MANIFEST);
    let mut stages = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .filter(|m| m.config_hash == config.hash())
        .map(|m| m.stages)
        .unwrap_or_default();
    stages.push(stage.to_string());
    let manifest = Manifest {
        tool: "epiforge".into(),
        version: VERSION.into(),
        seed: config.seed,
        config_hash: config.hash(),
        config: config.clone(),
        stages,
        artifacts: hash_artifacts(out)?,
        updated_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
