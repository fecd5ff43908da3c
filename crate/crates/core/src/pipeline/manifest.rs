//! Run manifest: config echo, seeds, per-stage artifacts with content hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage's configuration and upstream artifacts.
    pub key: String,
    pub cache_hit: bool,
    pub seconds: f64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub failure: Option<Failure>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        let seeds = BTreeMap::from([
            ("sample".to_string(), config.sample.seed),
            ("train".to_string(), config.train.seed),
            ("rank".to_string(), config.rank.seed),
            ("search".to_string(), config.search.seed),
        ]);
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            wall_clock_seconds: 0.0,
            stages: Vec::new(),
            failure: None,
        }
    }

    /// Load the manifest of an output directory.
    pub fn load(dir: &Path) -> Result<RunManifest> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }

    /// True when every listed artifact exists and matches its hash.
    pub fn verify(&self, dir: &Path) -> bool {
        self.stages.iter().flat_map(|s| &s.artifacts).all(|a| hash_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }
}

impl StageRecord {
    /// Artifacts still on disk with the recorded hashes.
    pub fn intact(&self, dir: &Path) -> bool {
        self.artifacts.iter().all(|a| hash_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    pub fn artifact_hashes(&self) -> String {
        self.artifacts.iter().map(|a| format!("{}={};", a.path, a.sha256)).collect()
    }
}
