//! Run manifest: the single file that makes an output directory
//! self-describing. It records the fully resolved config (flag overrides
//! already applied), its content hash, the seed, the artifact layout, and
//! wall-clock bounds of the run.

use std::time::{SystemTime, UNIX_EPOCH};

use pcdarts_core::config::Config;
use serde::{Deserialize, Serialize};

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Relative artifact names within the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactLayout {
    pub weights: String,
    pub arch: String,
    pub log: String,
    pub genotype: String,
    pub dot: String,
}

impl Default for ArtifactLayout {
    fn default() -> Self {
        ArtifactLayout {
            weights: "weights.pcnt".into(),
            arch: "arch.pcnt".into(),
            log: "log.csv".into(),
            genotype: "genotype.json".into(),
            dot: "cell.dot".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Resolved configuration snapshot; rerunning it reproduces the artifacts.
    pub config: Config,
    pub seed: u64,
    /// SHA-256 of the snapshot's canonical TOML rendering.
    pub config_hash: String,
    pub outputs: ArtifactLayout,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Reason the run rolled back early, if it did.
    pub aborted: Option<String>,
}

impl RunManifest {
    pub fn new(cfg: &Config, started_unix: u64, aborted: Option<String>) -> Self {
        RunManifest {
            config: cfg.clone(),
            seed: cfg.search.seed,
            config_hash: cfg.hash(),
            outputs: ArtifactLayout::default(),
            started_unix,
            finished_unix: unix_now(),
            aborted,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }
}
