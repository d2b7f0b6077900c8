use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{argmax, LAYER_NORM_EPS};
use crate::error::{ComboError, Result};
use crate::features::{FeatureDataset, Split};
use crate::tensor::{layer_norm, ParamStore, Parameter, Tape, Tensor};
use crate::training::{adamw_step, AdamWHyper, AdamWState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTarget {
    pub backbone_id: String,
    pub layer_id: u32,
}

/// Linear probe on mean-pooled tokens of one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub target: Option<ProbeTarget>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    /// Learn the layer-norm scale and shift jointly with the classifier.
    pub learned_norm: bool,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            target: None,
            steps: 100,
            batch_size: 128,
            lr_grid: vec![1.0, 0.1, 0.01, 0.001, 0.0001, 0.00001],
            seed: 0,
            learned_norm: false,
        }
    }
}

impl LinearProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(ComboError::Config("lr_grid is empty".into()));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(ComboError::Config(format!("lr_grid entry {lr} must be positive")));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ComboError::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One curve point: validation accuracy of a probe on (backbone, layer) at `lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub backbone: String,
    pub layer: u32,
    pub lr: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub backbone_id: String,
    pub layer_id: u32,
    /// Accuracy per grid point, in grid order.
    pub per_lr: Vec<CurveRow>,
    pub best: CurveRow,
}

/// Seed for one (backbone, layer, lr) job, independent of scheduling.
pub fn job_seed(seed: u64, backbone: &str, layer: u32, lr: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(backbone.as_bytes());
    h.update([0]);
    h.update(layer.to_le_bytes());
    h.update(lr.to_bits().to_le_bytes());
    let digest = h.finalize();
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Mean over tokens of one map for every sample in `split`, as `n × D`.
pub fn pooled_features(dataset: &FeatureDataset, target: &ProbeTarget, split: Split) -> Result<Tensor<f64>> {
    let meta = dataset
        .manifest()
        .backbone(&target.backbone_id)
        .ok_or_else(|| ComboError::Manifest(format!("unknown backbone {}", target.backbone_id)))?;
    if meta.layer_position(target.layer_id).is_none() {
        return Err(ComboError::Manifest(format!(
            "backbone {} has no layer {}",
            target.backbone_id, target.layer_id
        )));
    }
    let (t, d) = (meta.tokens_per_map, meta.embed_dim);
    let range = dataset.split_indices(split);
    let mut out = Tensor::zeros(&[range.len(), d]);
    for (row, s) in range.enumerate() {
        let map = dataset.map_data(s, &target.backbone_id, target.layer_id)?;
        let dst = &mut out.data_mut()[row * d..(row + 1) * d];
        for tok in map.chunks(d) {
            dst.iter_mut().zip(tok).for_each(|(a, &v)| *a += v as f64);
        }
        dst.iter_mut().for_each(|a| *a /= t as f64);
    }
    Ok(out)
}

fn plain_norm(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let d = x.cols();
    layer_norm(x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), LAYER_NORM_EPS)
}

struct ProbeData {
    train: Tensor<f64>,
    train_labels: Vec<usize>,
    val: Tensor<f64>,
    val_labels: Vec<usize>,
    classes: usize,
}

fn gather(x: &Tensor<f64>, rows: &[usize]) -> Tensor<f64> {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("consistent shape")
}

fn run_one(data: &ProbeData, cfg: &LinearProbeConfig, lr: f64, seed: u64) -> Result<f64> {
    let d = data.train.cols();
    let mut store = ParamStore::new();
    store.push(Parameter::new("head.weight", Tensor::zeros(&[d, data.classes]), false))?;
    store.push(Parameter::new("head.bias", Tensor::zeros(&[data.classes]), false))?;
    if cfg.learned_norm {
        store.push(Parameter::new("norm.weight", Tensor::full(&[d], 1.0), false))?;
        store.push(Parameter::new("norm.bias", Tensor::zeros(&[d]), false))?;
    }
    let (train_x, val_x) = if cfg.learned_norm {
        (data.train.clone(), data.val.clone())
    } else {
        (plain_norm(&data.train)?, plain_norm(&data.val)?)
    };
    let hyper = AdamWHyper {
        weight_decay: 0.0,
        ..AdamWHyper::default()
    };
    let mut state = AdamWState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.train_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..cfg.steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += batch.len();
        let xb = gather(&train_x, batch);
        let yb: Vec<usize> = batch.iter().map(|&i| data.train_labels[i]).collect();
        let grads = {
            let mut tape = Tape::new();
            let vars = store.register(&mut tape);
            let mut x = tape.input(xb);
            if cfg.learned_norm {
                x = tape.layer_norm(x, vars[2], vars[3], LAYER_NORM_EPS)?;
            }
            let logits = tape.affine(x, vars[0], vars[1])?;
            let loss = tape.cross_entropy(logits, &yb)?;
            tape.backward(loss)?
        };
        store.set_grads(&grads);
        adamw_step(&mut store, &mut state, lr, &hyper);
    }
    let mut x = val_x;
    if cfg.learned_norm {
        x = layer_norm(&x, &store.get(2).value, &store.get(3).value, LAYER_NORM_EPS)?;
    }
    let mut logits = x.matmul(&store.get(0).value)?;
    let c = data.classes;
    for row in logits.data_mut().chunks_mut(c) {
        row.iter_mut().zip(store.get(1).value.data()).for_each(|(a, b)| *a += b);
    }
    if !logits.is_finite() {
        return Ok(0.0);
    }
    let correct = (0..data.val_labels.len())
        .filter(|&i| argmax(logits.row(i)) == data.val_labels[i])
        .count();
    Ok(correct as f64 / data.val_labels.len() as f64)
}

fn prepare(dataset: &FeatureDataset, target: &ProbeTarget) -> Result<ProbeData> {
    let m = dataset.manifest();
    if m.splits.train == 0 || m.splits.val == 0 {
        return Err(ComboError::Data("linear probe needs non-empty train and val splits".into()));
    }
    Ok(ProbeData {
        train: pooled_features(dataset, target, Split::Train)?,
        train_labels: m.split_labels(Split::Train).to_vec(),
        val: pooled_features(dataset, target, Split::Val)?,
        val_labels: m.split_labels(Split::Val).to_vec(),
        classes: m.num_classes,
    })
}

/// Best grid point; ties go to the smaller learning rate.
fn best_of(rows: &[CurveRow]) -> CurveRow {
    rows.iter()
        .fold(None::<&CurveRow>, |best, r| match best {
            Some(b) if b.val_acc > r.val_acc || (b.val_acc == r.val_acc && b.lr <= r.lr) => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid")
        .clone()
}

fn probe_rows(dataset: &FeatureDataset, cfg: &LinearProbeConfig, target: &ProbeTarget) -> Result<Vec<CurveRow>> {
    let data = prepare(dataset, target)?;
    cfg.lr_grid
        .par_iter()
        .map(|&lr| {
            let seed = job_seed(cfg.seed, &target.backbone_id, target.layer_id, lr);
            Ok(CurveRow {
                backbone: target.backbone_id.clone(),
                layer: target.layer_id,
                lr,
                val_acc: run_one(&data, cfg, lr, seed)?,
            })
        })
        .collect()
}

/// Trains one probe per grid learning rate and keeps the best on val.
pub fn linear_probe(dataset: &FeatureDataset, cfg: &LinearProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let target = cfg
        .target
        .as_ref()
        .ok_or_else(|| ComboError::Config("linear probe needs a target".into()))?;
    let per_lr = probe_rows(dataset, cfg, target)?;
    Ok(ProbeResult {
        backbone_id: target.backbone_id.clone(),
        layer_id: target.layer_id,
        best: best_of(&per_lr),
        per_lr,
    })
}

/// Accuracy-vs-layer curve for one backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub backbone_id: String,
    /// Best grid point per layer, in layer order.
    pub rows: Vec<CurveRow>,
    /// Every (layer, lr) point.
    pub grid: Vec<CurveRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl LayerCurve {
    pub fn best_layer(&self) -> u32 {
        best_of(&self.rows).layer
    }
}

/// Runs [`linear_probe`] on every layer of `backbone`.
pub fn layer_sweep(dataset: &FeatureDataset, backbone: &str, cfg: &LinearProbeConfig) -> Result<LayerCurve> {
    cfg.validate()?;
    let meta = dataset
        .manifest()
        .backbone(backbone)
        .ok_or_else(|| ComboError::Manifest(format!("unknown backbone {backbone}")))?;
    if meta.layer_ids.len() < 2 {
        return Err(ComboError::Manifest(format!(
            "layer sweep needs at least 2 layers, {backbone} has {}",
            meta.layer_ids.len()
        )));
    }
    let per_layer: Vec<Vec<CurveRow>> = meta
        .layer_ids
        .par_iter()
        .map(|&layer| {
            let target = ProbeTarget {
                backbone_id: backbone.to_string(),
                layer_id: layer,
            };
            probe_rows(dataset, cfg, &target)
        })
        .collect::<Result<_>>()?;
    Ok(LayerCurve {
        backbone_id: backbone.to_string(),
        rows: per_layer.iter().map(|r| best_of(r)).collect(),
        grid: per_layer.into_iter().flatten().collect(),
        run_config: None,
    })
}
