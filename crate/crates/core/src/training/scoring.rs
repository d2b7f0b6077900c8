use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::trainer::{run_training, BackboneScore, TrainReport};
use super::TrainConfig;
use crate::adapter::{AdapterConfig, Checkpoint};
use crate::error::{ComboError, Result};
use crate::features::{FeatureDataset, LayerSubset};

/// Per-backbone relevance from regularized training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub dataset: String,
    pub manifest_hash: String,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    /// Final-epoch scores of each seed's run, in concat order.
    pub per_seed: Vec<Vec<BackboneScore>>,
    /// Scores averaged over seeds, in concat order.
    pub scores: Vec<BackboneScore>,
    /// Backbone ids by decreasing mean score; ties keep concat order.
    pub ranking: Vec<String>,
    pub val_accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl ImportanceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ComboError::Data(format!("importance report: {e}")))
    }

    pub fn top(&self, n: usize) -> Result<&[String]> {
        if n == 0 || n > self.ranking.len() {
            return Err(ComboError::Config(format!(
                "top-n must be in 1..={}, got {n}",
                self.ranking.len()
            )));
        }
        Ok(&self.ranking[..n])
    }
}

/// Trains once per seed with the group penalty at `lambda` and averages the
/// final projection-norm scores.
pub fn score_models(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    config: &TrainConfig,
    seeds: &[u64],
    lambda: f64,
) -> Result<ImportanceReport> {
    if seeds.is_empty() {
        return Err(ComboError::Config("scoring needs at least one seed".into()));
    }
    if !(lambda > 0.0) {
        return Err(ComboError::Config(format!("scoring needs λ > 0, got {lambda}")));
    }
    let (_, selection) = adapter.resolve(dataset.manifest())?;
    let ids = selection.backbone_ids();
    if ids.len() < 2 {
        return Err(ComboError::Config(format!(
            "scoring needs at least 2 backbones, got {}",
            ids.len()
        )));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut val_accuracy = Vec::with_capacity(seeds.len());
    let mut hash = String::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            lambda_reg: lambda,
            ..config.clone()
        };
        let (report, _, _) = run_training(dataset, adapter, &cfg)?;
        hash = report.manifest_hash.clone();
        val_accuracy.push(report.final_val_accuracy);
        per_seed.push(report.importance.expect("λ > 0 yields scores"));
    }
    let scores: Vec<BackboneScore> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| BackboneScore {
            backbone_id: id.clone(),
            score: per_seed.iter().map(|s| s[k].score).sum::<f64>() / seeds.len() as f64,
        })
        .collect();
    let mut ranked: Vec<&BackboneScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(ImportanceReport {
        dataset: dataset.manifest().name.clone(),
        manifest_hash: hash,
        lambda,
        seeds: seeds.to_vec(),
        ranking: ranked.into_iter().map(|s| s.backbone_id.clone()).collect(),
        per_seed,
        scores,
        val_accuracy,
        run_config: None,
    })
}

/// Adapter configuration restricted to the top-`n` backbones of `report`.
pub fn restrict_to_top(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    report: &ImportanceReport,
    n: usize,
) -> Result<AdapterConfig> {
    let (_, selection) = adapter.resolve(dataset.manifest())?;
    let current = selection.as_subset();
    let mut keep = Vec::new();
    for id in report.top(n)? {
        let subset = current.iter().find(|s| &s.backbone_id == id).ok_or_else(|| {
            ComboError::Manifest(format!("ranked backbone {id} is not part of the dataset selection"))
        })?;
        keep.push(LayerSubset::clone(subset));
    }
    Ok(AdapterConfig {
        layer_subset: Some(keep),
        ..adapter.clone()
    })
}

/// Retrains without the penalty on the top-`n` backbones only.
pub fn select_and_retrain(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    config: &TrainConfig,
    report: &ImportanceReport,
    n: usize,
) -> Result<(TrainReport, Checkpoint, Duration)> {
    let restricted = restrict_to_top(dataset, adapter, report, n)?;
    let cfg = TrainConfig {
        lambda_reg: 0.0,
        ..config.clone()
    };
    run_training(dataset, &restricted, &cfg)
}
