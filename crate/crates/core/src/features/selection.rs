use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::FeatureDataset;
use super::manifest::{grid_side, Manifest};
use super::preprocess::{interpolate_map, normalize_map, stack_maps, StackedTokens};
use crate::error::{ComboError, Result};
use crate::tensor::Scalar;

/// Layers probed for one backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSubset {
    pub backbone_id: String,
    pub layer_ids: Vec<u32>,
}

/// Which (backbone, layer) maps feed the adapter, in stacking order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    entries: Vec<SelectedBackbone>,
    target_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SelectedBackbone {
    backbone_id: String,
    layer_ids: Vec<u32>,
    tokens: usize,
    dim: usize,
}

impl FeatureSelection {
    /// Every map of the manifest, or only those in `subset`. Backbones absent
    /// from `subset` are dropped. Stacking order always follows the
    /// manifest's `concat_order` and layer order. The token count defaults to
    /// the smallest one among the selected backbones.
    pub fn new(
        manifest: &Manifest,
        subset: Option<&[LayerSubset]>,
        target_tokens: Option<usize>,
    ) -> Result<Self> {
        if let Some(subset) = subset {
            for s in subset {
                let meta = manifest.backbone(&s.backbone_id).ok_or_else(|| {
                    ComboError::Config(format!("layer subset names unknown backbone {}", s.backbone_id))
                })?;
                if let Some(l) = s.layer_ids.iter().find(|l| meta.layer_position(**l).is_none()) {
                    return Err(ComboError::Config(format!(
                        "backbone {} has no layer {l}",
                        s.backbone_id
                    )));
                }
            }
        }
        let mut entries = Vec::new();
        for meta in manifest.ordered_backbones() {
            let layer_ids: Vec<u32> = match subset {
                None => meta.layer_ids.clone(),
                Some(subset) => match subset.iter().find(|s| s.backbone_id == meta.backbone_id) {
                    None => continue,
                    Some(s) => meta
                        .layer_ids
                        .iter()
                        .copied()
                        .filter(|l| s.layer_ids.contains(l))
                        .collect(),
                },
            };
            if layer_ids.is_empty() {
                continue;
            }
            entries.push(SelectedBackbone {
                backbone_id: meta.backbone_id.clone(),
                layer_ids,
                tokens: meta.tokens_per_map,
                dim: meta.embed_dim,
            });
        }
        if entries.is_empty() {
            return Err(ComboError::Config("layer selection is empty".into()));
        }
        let target_tokens =
            target_tokens.unwrap_or_else(|| entries.iter().map(|e| e.tokens).min().expect("non-empty"));
        if grid_side(target_tokens).is_none() {
            return Err(ComboError::Layout(format!(
                "target token count {target_tokens} is not a square grid"
            )));
        }
        Ok(FeatureSelection {
            entries,
            target_tokens,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.target_tokens
    }

    /// Stacked dimension `D`.
    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|e| e.dim * e.layer_ids.len()).sum()
    }

    pub fn backbone_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.backbone_id.clone()).collect()
    }

    /// (backbone, layer) pairs in stacking order.
    pub fn order(&self) -> Vec<(String, u32)> {
        self.entries
            .iter()
            .flat_map(|e| e.layer_ids.iter().map(move |&l| (e.backbone_id.clone(), l)))
            .collect()
    }

    /// The layer subset that reproduces this selection.
    pub fn as_subset(&self) -> Vec<LayerSubset> {
        self.entries
            .iter()
            .map(|e| LayerSubset {
                backbone_id: e.backbone_id.clone(),
                layer_ids: e.layer_ids.clone(),
            })
            .collect()
    }

    /// Rows of the projection input axis owned by each backbone.
    pub fn backbone_rows(&self) -> Vec<(String, Range<usize>)> {
        let mut start = 0;
        self.entries
            .iter()
            .map(|e| {
                let len = e.dim * e.layer_ids.len();
                let r = (e.backbone_id.clone(), start..start + len);
                start += len;
                r
            })
            .collect()
    }

    /// Interpolates, normalizes and stacks the selected maps of one sample.
    pub fn prepare_sample<S: Scalar>(
        &self,
        dataset: &FeatureDataset,
        sample: usize,
    ) -> Result<StackedTokens<S>> {
        let mut maps = Vec::with_capacity(self.order().len());
        for e in &self.entries {
            for &l in &e.layer_ids {
                let raw = dataset.feature_map::<S>(sample, &e.backbone_id, l)?;
                maps.push(normalize_map(&interpolate_map(&raw, self.target_tokens)?));
            }
        }
        stack_maps(&maps.iter().collect::<Vec<_>>())
    }

    /// [`prepare_sample`](Self::prepare_sample) over `samples`, in order.
    pub fn prepare<S: Scalar>(
        &self,
        dataset: &FeatureDataset,
        samples: Range<usize>,
    ) -> Result<Vec<StackedTokens<S>>> {
        samples
            .into_par_iter()
            .map(|i| self.prepare_sample(dataset, i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::manifest::tests::sample_manifest;
    use super::*;

    #[test]
    fn full_selection_follows_concat_order() {
        let m = sample_manifest();
        let s = FeatureSelection::new(&m, None, None).unwrap();
        assert_eq!(s.order(), vec![("b".into(), 5), ("a".into(), 1), ("a".into(), 2)]);
        assert_eq!(s.total_dim(), m.total_dim());
        assert_eq!(s.target_tokens(), 4);
        assert_eq!(
            s.backbone_rows(),
            vec![("b".to_string(), 0..2), ("a".to_string(), 2..8)]
        );
    }

    #[test]
    fn subset_drops_backbones_and_layers() {
        let m = sample_manifest();
        let subset = [LayerSubset {
            backbone_id: "b".into(),
            layer_ids: vec![5],
        }];
        let s = FeatureSelection::new(&m, Some(&subset), None).unwrap();
        assert_eq!(s.order(), vec![("b".into(), 5)]);
        assert_eq!(s.target_tokens(), 9);
        let bad = [LayerSubset {
            backbone_id: "a".into(),
            layer_ids: vec![7],
        }];
        assert!(FeatureSelection::new(&m, Some(&bad), None).is_err());
        let empty = [LayerSubset {
            backbone_id: "a".into(),
            layer_ids: vec![],
        }];
        assert!(FeatureSelection::new(&m, Some(&empty), None).is_err());
        assert!(FeatureSelection::new(&m, None, Some(5)).is_err());
    }
}
