use std::path::{Path, PathBuf};

use combo_core::adapter::AdapterConfig;
use combo_core::baselines::{LayerMode, LinearProbeConfig};
use combo_core::synthgen::SynthSpec;
use combo_core::training::{TrainConfig, SCORING_LAMBDA};
use combo_core::{ComboError, Result};
use serde::{Deserialize, Serialize};

/// Relevance scoring and selection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub top_n: Option<usize>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            seeds: vec![0, 1, 2],
            lambda: SCORING_LAMBDA,
            top_n: None,
        }
    }
}

/// Everything a subcommand needs, loaded from one JSON file. Unknown keys
/// are rejected at every level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub layers: LayerMode,
    pub scoring: ScoringConfig,
    pub probe: LinearProbeConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| ComboError::Config(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ComboError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), Self::read)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| ComboError::Config("no dataset given (--dataset or config \"dataset\")".into()))
    }

    pub fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| ComboError::Config("no output path given (--out or config \"out\")".into()))
    }
}
