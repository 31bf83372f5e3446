//! Run manifest: one entry per completed stage with content hashes of its
//! inputs and outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
    pub seed: Option<u64>,
    pub wall_time_ms: u128,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<toml::Value>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Self {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|raw| serde_json::from_str(&raw).ok())
            .unwrap_or_default()
    }

    pub fn upsert(&mut self, record: StageRecord) {
        if let Some(existing) = self.stages.iter_mut().find(|s| s.stage == record.stage) {
            *existing = record;
        } else {
            self.stages.push(record);
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> anyhow::Result<ArtifactRecord> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(ArtifactRecord {
        path: path.display().to_string(),
        sha256: format!("{digest:x}"),
    })
}

pub fn hash_files(paths: &[PathBuf]) -> anyhow::Result<Vec<ArtifactRecord>> {
    paths.iter().map(|p| hash_file(p)).collect()
}
