//! Provenance records written next to every artifact a stage produces.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use aspectfsl_core::fingerprint;
use serde::{Deserialize, Serialize};

pub const STAMP_FILE: &str = "stamp.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    /// Content hash; absent for directories.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

fn artifact(role: &str, path: &Path) -> Result<Artifact> {
    let path = std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))?;
    let sha256 = if path.is_file() { Some(fingerprint::file_hash(&path)?) } else { None };
    Ok(Artifact { role: role.to_string(), path, sha256 })
}

impl Stamp {
    pub fn new<C: Serialize>(stage: &str, seed: Option<u64>, config: &C) -> Result<Self> {
        Ok(Self {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: fingerprint::config_hash(config)?,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push(artifact(role, path)?);
        Ok(self)
    }

    pub fn output(mut self, role: &str, path: &Path) -> Result<Self> {
        self.outputs.push(artifact(role, path)?);
        Ok(self)
    }

    pub fn input_path(&self, role: &str) -> Option<&Path> {
        self.inputs.iter().find(|a| a.role == role).map(|a| a.path.as_path())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Where the stamp of `artifact` lives: `DIR/stamp.json` for a directory,
/// `FILE.stamp.json` next to a file.
pub fn stamp_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(STAMP_FILE)
    } else {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".stamp.json");
        artifact.with_file_name(name)
    }
}

/// Manifest an episode file was built from, as recorded in its stamp.
pub fn recorded_manifest(episodes: &Path) -> Result<PathBuf> {
    let path = stamp_path(episodes);
    let stamp = Stamp::load(&path).context("no --manifest given and the episode file has no readable stamp")?;
    stamp
        .input_path("manifest")
        .map(Path::to_path_buf)
        .with_context(|| format!("{} does not record a manifest", path.display()))
}
