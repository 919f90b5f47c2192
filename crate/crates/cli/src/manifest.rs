//! Run manifest: per-stage content hashes, artifact paths and the headline
//! metrics. Stages are content-addressed so reruns with an unchanged
//! configuration are no-ops.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub headline: Option<Headline>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub completed_at_epoch_s: u64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessMetrics {
    pub j_mean: f64,
    pub j_std: f64,
    pub f_sa: f64,
    pub f_lb: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Headline {
    pub gp_model: ProcessMetrics,
    pub real_process: ProcessMetrics,
    pub baseline_open_loop: ProcessMetrics,
    pub xi_star: Vec<f64>,
    /// std(J policy) / std(J open-loop baseline) on the same seeds.
    pub objective_std_ratio: f64,
    /// max over steps and控制 of per-step control std / control range.
    pub control_std_fraction: f64,
}

impl Manifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_default(out: &Path, seed: u64) -> Self {
        match std::fs::read_to_string(Self::path(out)) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| Manifest {
                seed,
                ..Manifest::default()
            }),
            Err(_) => Manifest { seed, ..Manifest::default() },
        }
    }

    pub fn save(&self, out: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::pipeline::write_atomic(&Self::path(out), text.as_bytes())?;
        Ok(())
    }

    /// True when the stage already completed under the same hash and all
    /// its artifacts still exist.
    pub fn stage_current(&self, out: &Path, stage: &str, hash: &str) -> bool {
        match self.stages.get(stage) {
            Some(rec) => {
                rec.hash == hash && rec.artifacts.iter().all(|a| out.join(a).exists())
            }
            None => false,
        }
    }

    pub fn record_stage(&mut self, stage: &str, hash: String, artifacts: Vec<String>) {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(
            stage.to_string(),
            StageRecord { hash, completed_at_epoch_s: now, artifacts },
        );
    }

    pub fn stage_hash(&self, stage: &str) -> Option<&str> {
        self.stages.get(stage).map(|r| r.hash.as_str())
    }
}

/// Stable content hash of anything serializable, chained with parents.
pub fn content_hash<T: Serialize>(value: &T, seed: u64, parents: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(value).expect("serializable").as_bytes());
    hasher.update(seed.to_le_bytes());
    for p in parents {
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
