use std::path::{Path, PathBuf};

use super::blob::{blob_file_name, decode_blob, encode_blob, write_atomic};
use super::manifest::{Manifest, Split, MANIFEST_FILE};
use super::preprocess::{FeatureBundle, FeatureMap};
use crate::error::{ComboError, Result};
use crate::tensor::{Scalar, Tensor};

/// An in-memory feature dataset: manifest plus one `f32` buffer per
/// (backbone, layer), laid out `[num_samples, tokens, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    manifest: Manifest,
    /// Indexed by `slot(backbone_index, layer_position)`.
    maps: Vec<Vec<f32>>,
    root: Option<PathBuf>,
}

impl FeatureDataset {
    /// `maps` follows `manifest.backbones` order, then `layer_ids` order.
    pub fn new(manifest: Manifest, maps: Vec<Vec<f32>>) -> Result<Self> {
        manifest.validate()?;
        let expected: Vec<usize> = manifest
            .backbones
            .iter()
            .flat_map(|b| b.layer_ids.iter().map(move |_| b.map_len()))
            .collect();
        if maps.len() != expected.len() {
            return Err(ComboError::Manifest(format!(
                "{} map buffers for {} declared maps",
                maps.len(),
                expected.len()
            )));
        }
        for (m, per) in maps.iter().zip(&expected) {
            if m.len() != per * manifest.num_samples {
                return Err(ComboError::Data(format!(
                    "map buffer has {} values, expected {}",
                    m.len(),
                    per * manifest.num_samples
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ComboError::Data("non-finite feature value".into()));
            }
        }
        Ok(FeatureDataset {
            manifest,
            maps,
            root: None,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub(crate) fn set_root(&mut self, dir: &Path) {
        self.root = Some(dir.to_path_buf());
    }

    pub fn num_samples(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn label(&self, sample: usize) -> usize {
        self.manifest.labels[sample]
    }

    pub fn split_indices(&self, split: Split) -> std::ops::Range<usize> {
        self.manifest.splits.range(split)
    }

    fn slot(&self, backbone: usize, layer_pos: usize) -> usize {
        self.manifest.backbones[..backbone]
            .iter()
            .map(|b| b.layer_ids.len())
            .sum::<usize>()
            + layer_pos
    }

    /// Raw `[tokens × dim]` values of one map of one sample.
    pub fn map_data(&self, sample: usize, backbone_id: &str, layer_id: u32) -> Result<&[f32]> {
        let (bi, meta) = self
            .manifest
            .backbones
            .iter()
            .enumerate()
            .find(|(_, b)| b.backbone_id == backbone_id)
            .ok_or_else(|| ComboError::Manifest(format!("unknown backbone {backbone_id}")))?;
        let lp = meta.layer_position(layer_id).ok_or_else(|| {
            ComboError::Manifest(format!("backbone {backbone_id} has no layer {layer_id}"))
        })?;
        if sample >= self.manifest.num_samples {
            return Err(ComboError::Data(format!("sample {sample} out of range")));
        }
        let per = meta.map_len();
        Ok(&self.maps[self.slot(bi, lp)][sample * per..(sample + 1) * per])
    }

    pub fn feature_map<S: Scalar>(
        &self,
        sample: usize,
        backbone_id: &str,
        layer_id: u32,
    ) -> Result<FeatureMap<S>> {
        let meta = self.manifest.backbone(backbone_id).expect("checked by map_data");
        let raw = self.map_data(sample, backbone_id, layer_id)?;
        FeatureMap::new(
            backbone_id,
            layer_id,
            Tensor::new(
                vec![meta.tokens_per_map, meta.embed_dim],
                raw.iter().map(|&v| S::of(v as f64)).collect(),
            )?,
        )
    }

    /// Every declared map of one sample.
    pub fn bundle<S: Scalar>(&self, sample: usize) -> Result<FeatureBundle<S>> {
        let mut maps = Vec::new();
        for b in &self.manifest.backbones {
            for &l in &b.layer_ids {
                maps.push(self.feature_map(sample, &b.backbone_id, l)?);
            }
        }
        Ok(FeatureBundle {
            sample_id: sample,
            label: self.label(sample),
            maps,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let mut maps = Vec::new();
        for b in &manifest.backbones {
            for &l in &b.layer_ids {
                let path = dir.join(blob_file_name(&b.backbone_id, l));
                let bytes = std::fs::read(&path).map_err(|e| ComboError::io(&path, e))?;
                maps.push(decode_blob(&bytes, manifest.num_samples, b.map_len(), &path)?);
            }
        }
        let mut ds = FeatureDataset::new(manifest, maps)?;
        ds.root = Some(dir.to_path_buf());
        Ok(ds)
    }

    /// Writes `manifest.json` and every blob into `dir`, each via a temp file
    /// and rename.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ComboError::io(dir, e))?;
        let mut slot = 0;
        for b in &self.manifest.backbones {
            for &l in &b.layer_ids {
                let bytes = encode_blob(self.manifest.num_samples, b.map_len(), &self.maps[slot]);
                write_atomic(&dir.join(blob_file_name(&b.backbone_id, l)), &bytes)?;
                slot += 1;
            }
        }
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest.to_json().as_bytes())
    }
}
