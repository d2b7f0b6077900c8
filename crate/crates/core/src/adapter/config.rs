use serde::{Deserialize, Serialize};

use crate::error::{ComboError, Result};
use crate::features::{FeatureSelection, LayerSubset, Manifest};

/// Shape of the adapter. Defaults follow the reference recipe: six pre-norm
/// blocks of width 128 with two heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Output width `D′` of the shared token projection.
    pub compress_dim: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Taken from the dataset manifest when unset.
    pub num_classes: Option<usize>,
    pub use_positional_embedding: bool,
    /// Probed layers per backbone; all manifest layers when unset.
    pub layer_subset: Option<Vec<LayerSubset>>,
    /// Common token count; the smallest selected map when unset.
    pub target_tokens: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            compress_dim: 128,
            depth: 6,
            embed_dim: 128,
            num_heads: 2,
            mlp_ratio: 4,
            num_classes: None,
            use_positional_embedding: true,
            layer_subset: None,
            target_tokens: None,
        }
    }
}

impl AdapterConfig {
    /// Compact configuration used for quick experiments and tests.
    pub fn small(dim: usize, depth: usize, heads: usize) -> Self {
        AdapterConfig {
            compress_dim: dim,
            embed_dim: dim,
            depth,
            num_heads: heads,
            ..AdapterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(ComboError::Config("depth must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ComboError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.compress_dim != self.embed_dim {
            return Err(ComboError::Config(format!(
                "compress_dim {} must equal embed_dim {}",
                self.compress_dim, self.embed_dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(ComboError::Config("mlp_ratio must be positive".into()));
        }
        if self.num_classes == Some(0) {
            return Err(ComboError::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Pins every manifest-dependent field (classes, layer subset, token
    /// count) so the result fully describes the model.
    pub fn resolve(&self, manifest: &Manifest) -> Result<(AdapterConfig, FeatureSelection)> {
        self.validate()?;
        let classes = match self.num_classes {
            None => manifest.num_classes,
            Some(c) if c == manifest.num_classes => c,
            Some(c) => {
                return Err(ComboError::Config(format!(
                    "config has {c} classes, dataset has {}",
                    manifest.num_classes
                )))
            }
        };
        let selection =
            FeatureSelection::new(manifest, self.layer_subset.as_deref(), self.target_tokens)?;
        let resolved = AdapterConfig {
            num_classes: Some(classes),
            layer_subset: Some(selection.as_subset()),
            target_tokens: Some(selection.target_tokens()),
            ..self.clone()
        };
        Ok((resolved, selection))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let c = AdapterConfig::default();
        assert_eq!((c.depth, c.embed_dim, c.num_heads), (6, 128, 2));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(AdapterConfig { depth: 0, ..Default::default() }.validate().is_err());
        assert!(AdapterConfig { num_heads: 3, ..Default::default() }.validate().is_err());
        assert!(AdapterConfig { compress_dim: 64, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn strict_json() {
        assert!(serde_json::from_str::<AdapterConfig>(r#"{"depth": 2}"#).is_ok());
        assert!(serde_json::from_str::<AdapterConfig>(r#"{"dept": 2}"#).is_err());
    }
}
