use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ComboError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Train/val/test sample counts. Samples are stored contiguously in that
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = ComboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ComboError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Split-size convention a dataset claims to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Custom,
    /// 800 training and 200 validation samples.
    Vtab1k,
}

impl Protocol {
    pub const VTAB1K_TRAIN: usize = 800;
    pub const VTAB1K_VAL: usize = 200;
}

/// One backbone's probed layers and per-map layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub backbone_id: String,
    pub layer_ids: Vec<u32>,
    /// Spatial tokens per map, after class/register tokens are stripped.
    pub tokens_per_map: usize,
    pub embed_dim: usize,
}

impl BackboneMeta {
    pub fn new(
        backbone_id: impl Into<String>,
        layer_ids: Vec<u32>,
        tokens_per_map: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let meta = BackboneMeta {
            backbone_id: backbone_id.into(),
            layer_ids,
            tokens_per_map,
            embed_dim,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.backbone_id;
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(ComboError::Manifest(format!(
                "backbone id {id:?} must be non-empty [A-Za-z0-9_-]"
            )));
        }
        if self.layer_ids.is_empty() {
            return Err(ComboError::Manifest(format!("backbone {id}: no layers")));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ComboError::Manifest(format!(
                "backbone {id}: layer ids must be strictly increasing"
            )));
        }
        if grid_side(self.tokens_per_map).is_none() {
            return Err(ComboError::Layout(format!(
                "backbone {id}: {} tokens is not a square grid",
                self.tokens_per_map
            )));
        }
        if self.embed_dim == 0 {
            return Err(ComboError::Manifest(format!("backbone {id}: zero embed_dim")));
        }
        Ok(())
    }

    pub fn map_len(&self) -> usize {
        self.tokens_per_map * self.embed_dim
    }

    pub fn layer_position(&self, layer_id: u32) -> Option<usize> {
        self.layer_ids.iter().position(|&l| l == layer_id)
    }
}

/// Side length of a square token grid, if `tokens` is a positive square.
pub fn grid_side(tokens: usize) -> Option<usize> {
    if tokens == 0 {
        return None;
    }
    let side = (tokens as f64).sqrt().round() as usize;
    (side * side == tokens).then_some(side)
}

/// Dataset description stored as `manifest.json` next to the map blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub num_classes: usize,
    pub num_samples: usize,
    #[serde(default)]
    pub protocol: Protocol,
    pub splits: Splits,
    pub backbones: Vec<BackboneMeta>,
    /// Backbone ids in stacking order.
    pub concat_order: Vec<String>,
    pub labels: Vec<usize>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(ComboError::Manifest(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        if self.num_classes == 0 {
            return Err(ComboError::Manifest("num_classes must be positive".into()));
        }
        if self.splits.total() != self.num_samples {
            return Err(ComboError::Manifest(format!(
                "splits sum to {} but num_samples is {}",
                self.splits.total(),
                self.num_samples
            )));
        }
        if self.labels.len() != self.num_samples {
            return Err(ComboError::Manifest(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.num_samples
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(ComboError::Manifest(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.protocol == Protocol::Vtab1k
            && (self.splits.train != Protocol::VTAB1K_TRAIN
                || self.splits.val != Protocol::VTAB1K_VAL)
        {
            return Err(ComboError::Manifest(format!(
                "vtab-1k protocol requires 800 train / 200 val, got {} / {}",
                self.splits.train, self.splits.val
            )));
        }
        if self.backbones.is_empty() {
            return Err(ComboError::Manifest("no backbones".into()));
        }
        let mut seen = HashSet::new();
        for b in &self.backbones {
            b.validate()?;
            if !seen.insert(b.backbone_id.as_str()) {
                return Err(ComboError::Manifest(format!(
                    "duplicate backbone {}",
                    b.backbone_id
                )));
            }
        }
        let order: HashSet<&str> = self.concat_order.iter().map(String::as_str).collect();
        if order.len() != self.concat_order.len() || order != seen {
            return Err(ComboError::Manifest(
                "concat_order must list every backbone exactly once".into(),
            ));
        }
        Ok(())
    }

    pub fn backbone(&self, id: &str) -> Option<&BackboneMeta> {
        self.backbones.iter().find(|b| b.backbone_id == id)
    }

    pub fn backbone_index(&self, id: &str) -> Option<usize> {
        self.backbones.iter().position(|b| b.backbone_id == id)
    }

    /// Backbones in stacking order.
    pub fn ordered_backbones(&self) -> impl Iterator<Item = &BackboneMeta> {
        self.concat_order
            .iter()
            .map(move |id| self.backbone(id).expect("validated concat_order"))
    }

    /// Sum of `embed_dim` over every (backbone, layer) pair.
    pub fn total_dim(&self) -> usize {
        self.backbones
            .iter()
            .map(|b| b.embed_dim * b.layer_ids.len())
            .sum()
    }

    pub fn min_tokens(&self) -> usize {
        self.backbones
            .iter()
            .map(|b| b.tokens_per_map)
            .min()
            .expect("validated non-empty")
    }

    pub fn split_labels(&self, split: Split) -> &[usize] {
        &self.labels[self.splits.range(split)]
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|source| ComboError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ComboError::io(&path, e))?;
        Self::from_json(&text, &path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
