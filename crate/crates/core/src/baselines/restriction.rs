use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, Checkpoint};
use crate::error::{ComboError, Result};
use crate::features::{FeatureDataset, LayerSubset};
use crate::training::{run_training, TrainConfig, TrainReport};

/// Which of each backbone's probed layers feed the adapter. Positions are
/// 1-based over the backbone's layer list of length `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerMode {
    #[default]
    All,
    Last,
    /// Positions `1..=⌊N/2⌋`.
    FirstHalf,
    /// Positions `⌊N/2⌋+1..=N`.
    LastHalf,
    /// Positions 2, 4, 6, …
    Even,
}

impl LayerMode {
    pub fn pick(self, layers: &[u32]) -> Vec<u32> {
        let n = layers.len();
        let keep = |pos: usize| match self {
            LayerMode::All => true,
            LayerMode::Last => pos == n,
            LayerMode::FirstHalf => pos <= n / 2,
            LayerMode::LastHalf => pos > n / 2,
            LayerMode::Even => pos.is_multiple_of(2),
        };
        layers
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(i + 1))
            .map(|(_, &l)| l)
            .collect()
    }
}

impl FromStr for LayerMode {
    type Err = ComboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LayerMode::All),
            "last" => Ok(LayerMode::Last),
            "first-half" => Ok(LayerMode::FirstHalf),
            "last-half" => Ok(LayerMode::LastHalf),
            "even" | "even-blocks" => Ok(LayerMode::Even),
            other => Err(ComboError::Config(format!("unknown layer mode {other:?}"))),
        }
    }
}

/// `adapter` with every selected backbone's layers filtered by `mode`.
pub fn restrict_layers(dataset: &FeatureDataset, adapter: &AdapterConfig, mode: LayerMode) -> Result<AdapterConfig> {
    let (_, selection) = adapter.resolve(dataset.manifest())?;
    let subset = selection
        .as_subset()
        .into_iter()
        .map(|s| {
            let layer_ids = mode.pick(&s.layer_ids);
            if layer_ids.is_empty() {
                return Err(ComboError::Config(format!(
                    "layer mode {mode:?} leaves backbone {} with no layers",
                    s.backbone_id
                )));
            }
            Ok(LayerSubset { layer_ids, ..s })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterConfig {
        layer_subset: Some(subset),
        ..adapter.clone()
    })
}

/// Trains the adapter on the layers chosen by `mode`.
pub fn combo_layer_restriction(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    config: &TrainConfig,
    mode: LayerMode,
) -> Result<(TrainReport, Checkpoint, Duration)> {
    run_training(dataset, &restrict_layers(dataset, adapter, mode)?, config)
}
