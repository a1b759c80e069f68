//! Run manifests: enough to reproduce a run's CSV exactly.

use std::path::Path;

use anyhow::{Context, Result};
use byzsgd_core::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;

/// Crate version plus `git describe` output of the build, when available.
pub const VERSION: &str = env!("BYZSGD_VERSION");

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub preset: Option<String>,
    /// Sweep point label; `run` for single runs.
    pub point: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// Flat keys the run was built from; absent for manifest re-runs.
    pub scenario: Option<Scenario>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
