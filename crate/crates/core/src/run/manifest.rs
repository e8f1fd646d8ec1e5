//! Immutable record of a training run: config snapshot, seed, split
//! fingerprint, stage records, and hash-verified artifact references.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, RunDir};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
    Interrupted,
}

/// A file the manifest vouches for, addressed relative to the run root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

/// One pipeline stage's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub epochs_done: usize,
    pub checkpoints: Vec<String>,
    pub snapshots: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub split_fingerprint: String,
    pub dataset: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRef>,
    pub status: RunStatus,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        command: &str,
        config: RunConfig,
        split_fingerprint: String,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            seed: config.seed,
            dataset: config.dataset_descriptor(),
            config,
            split_fingerprint,
            stages: Vec::new(),
            artifacts: Vec::new(),
            status: RunStatus::Running,
        }
    }

    /// Record (or re-record) an artifact with its current hash.
    pub fn record_artifact(&mut self, dir: &RunDir, relative: &str) -> Result<()> {
        let hash = sha256_file(&dir.root.join(relative))?;
        if let Some(existing) = self.artifacts.iter_mut().find(|a| a.path == relative) {
            existing.sha256 = hash;
        } else {
            self.artifacts.push(ArtifactRef {
                path: relative.to_string(),
                sha256: hash,
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        std::fs::write(dir.manifest(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &RunDir) -> Result<Self> {
        let bytes = std::fs::read(dir.manifest())?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Every referenced artifact must exist and hash-verify.
    pub fn verify(&self, dir: &RunDir) -> Result<()> {
        for a in &self.artifacts {
            let path = dir.root.join(&a.path);
            if !path.exists() {
                return Err(Error::MissingDependency(format!(
                    "artifact {} of run {}",
                    a.path, self.run_id
                )));
            }
            let hash = sha256_file(&path)?;
            if hash != a.sha256 {
                return Err(Error::ArtifactCorrupt {
                    path,
                    detail: format!("expected {}, found {hash}", a.sha256),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_verifies_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path(), "run-1").unwrap();
        std::fs::write(dir.root.join("blob.bin"), b"payload").unwrap();
        let mut m = RunManifest::new("run-1", "train-robust", RunConfig::default(), "fp".into());
        m.record_artifact(&dir, "blob.bin").unwrap();
        m.status = RunStatus::Completed;
        m.save(&dir).unwrap();

        let loaded = RunManifest::load(&dir).unwrap();
        loaded.verify(&dir).unwrap();

        // tamper → verification fails
        std::fs::write(dir.root.join("blob.bin"), b"tampered").unwrap();
        assert!(matches!(
            loaded.verify(&dir),
            Err(Error::ArtifactCorrupt { .. })
        ));

        // remove → missing dependency
        std::fs::remove_file(dir.root.join("blob.bin")).unwrap();
        assert!(matches!(
            loaded.verify(&dir),
            Err(Error::MissingDependency(_))
        ));
    }
}
