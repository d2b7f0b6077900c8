//! Per-map preprocessing: resampling to a shared token grid, normalization,
//! and token-wise stacking.

use super::manifest::grid_side;
use crate::error::{ComboError, Result};
use crate::tensor::{Scalar, Tensor};

/// Added to the standard deviation in [`normalize_map`].
pub const NORM_EPS: f64 = 1e-6;

/// One layer's activations for one sample, `[tokens × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S: Scalar> {
    pub backbone_id: String,
    pub layer_id: u32,
    pub data: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(backbone_id: impl Into<String>, layer_id: u32, data: Tensor<S>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(ComboError::InvalidTensor(format!(
                "feature map must be [tokens × dim], got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(ComboError::Data("feature map has non-finite values".into()));
        }
        Ok(FeatureMap {
            backbone_id: backbone_id.into(),
            layer_id,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// All maps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<S: Scalar> {
    pub sample_id: usize,
    pub label: usize,
    pub maps: Vec<FeatureMap<S>>,
}

/// Token-wise concatenation of every selected map, `[T × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTokens<S: Scalar> {
    pub data: Tensor<S>,
}

impl<S: Scalar> StackedTokens<S> {
    pub fn tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Source coordinate and blend weight along one axis for half-pixel-centre
/// bilinear resampling.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples the map's square token grid to `target_tokens` with bilinear
/// interpolation on half-pixel centres. Equal sizes pass through untouched.
pub fn interpolate_map<S: Scalar>(map: &FeatureMap<S>, target_tokens: usize) -> Result<FeatureMap<S>> {
    let tokens = map.tokens();
    let in_side = grid_side(tokens)
        .ok_or_else(|| ComboError::Layout(format!("{tokens} tokens is not a square grid")))?;
    let out_side = grid_side(target_tokens)
        .ok_or_else(|| ComboError::Layout(format!("{target_tokens} tokens is not a square grid")))?;
    if tokens == target_tokens {
        return Ok(map.clone());
    }
    let d = map.dim();
    let src = map.data.data();
    let taps = axis_taps(in_side, out_side);
    let mut out = Vec::with_capacity(target_tokens * d);
    for &(y0, y1, wy) in &taps {
        let wy = S::of(wy);
        for &(x0, x1, wx) in &taps {
            let wx = S::of(wx);
            let p00 = &src[(y0 * in_side + x0) * d..][..d];
            let p01 = &src[(y0 * in_side + x1) * d..][..d];
            let p10 = &src[(y1 * in_side + x0) * d..][..d];
            let p11 = &src[(y1 * in_side + x1) * d..][..d];
            for c in 0..d {
                // a + w·(b − a) keeps constant inputs exact.
                let top = p00[c] + wx * (p01[c] - p00[c]);
                let bottom = p10[c] + wx * (p11[c] - p10[c]);
                out.push(top + wy * (bottom - top));
            }
        }
    }
    FeatureMap::new(
        map.backbone_id.clone(),
        map.layer_id,
        Tensor::new(vec![target_tokens, d], out)?,
    )
}

/// Standardizes a map with one mean and one population standard deviation
/// taken over all of its tokens and channels.
pub fn normalize_map<S: Scalar>(map: &FeatureMap<S>) -> FeatureMap<S> {
    let data = map.data.data();
    let n = S::of(data.len() as f64);
    let mean = data.iter().copied().sum::<S>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let denom = var.sqrt() + S::of(NORM_EPS);
    FeatureMap {
        backbone_id: map.backbone_id.clone(),
        layer_id: map.layer_id,
        data: map.data.map(|v| (v - mean) / denom),
    }
}

/// Concatenates, per token, the maps listed in `order` (backbone, layer).
/// Maps must already share one token count.
pub fn stack_bundle<S: Scalar>(
    bundle: &FeatureBundle<S>,
    order: &[(String, u32)],
) -> Result<StackedTokens<S>> {
    let mut picked = Vec::with_capacity(order.len());
    for (backbone, layer) in order {
        let m = bundle
            .maps
            .iter()
            .find(|m| &m.backbone_id == backbone && m.layer_id == *layer)
            .ok_or_else(|| ComboError::IncompleteBundle {
                backbone: backbone.clone(),
                layer: *layer,
            })?;
        picked.push(m);
    }
    stack_maps(&picked)
}

pub(crate) fn stack_maps<S: Scalar>(maps: &[&FeatureMap<S>]) -> Result<StackedTokens<S>> {
    let first = maps
        .first()
        .ok_or_else(|| ComboError::Config("nothing to stack".into()))?;
    let t = first.tokens();
    if let Some(m) = maps.iter().find(|m| m.tokens() != t) {
        return Err(ComboError::Layout(format!(
            "map {}.{} has {} tokens, expected {t}",
            m.backbone_id,
            m.layer_id,
            m.tokens()
        )));
    }
    let d: usize = maps.iter().map(|m| m.dim()).sum();
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        for m in maps {
            out.extend_from_slice(m.data.row(i));
        }
    }
    Ok(StackedTokens {
        data: Tensor::new(vec![t, d], out)?,
    })
}

/// Parameter count of a linear classifier over fully flattened stacked
/// features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct NaiveStackCount {
    pub weights: u64,
    pub biases: u64,
}

impl NaiveStackCount {
    pub fn total(&self) -> u64 {
        self.weights + self.biases
    }
}

/// `tokens · Σ layer_dims · C` weights plus `C` biases.
pub fn naive_stack_param_count(
    tokens: usize,
    layer_dims: impl IntoIterator<Item = usize>,
    num_classes: usize,
) -> NaiveStackCount {
    let d: u64 = layer_dims.into_iter().map(|x| x as u64).sum();
    NaiveStackCount {
        weights: tokens as u64 * d * num_classes as u64,
        biases: num_classes as u64,
    }
}

/// [`naive_stack_param_count`] for a manifest's backbones at their common
/// (smallest) token count.
pub fn naive_stack_param_count_for(
    backbones: &[super::BackboneMeta],
    num_classes: usize,
) -> NaiveStackCount {
    let tokens = backbones.iter().map(|b| b.tokens_per_map).min().unwrap_or(0);
    naive_stack_param_count(
        tokens,
        backbones
            .iter()
            .flat_map(|b| b.layer_ids.iter().map(move |_| b.embed_dim)),
        num_classes,
    )
}
