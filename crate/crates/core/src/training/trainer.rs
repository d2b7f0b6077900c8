use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{group_norms, record_group_penalty, BackboneRows};
use super::optim::{adamw_step, AdamWHyper, AdamWState};
use super::schedule::lr_at;
use super::TrainConfig;
use crate::adapter::{argmax, AdapterConfig, AdapterParams, Checkpoint, ParamCounts};
use crate::error::{ComboError, Result};
use crate::features::{FeatureDataset, FeatureSelection, Split, StackedTokens};
use crate::tensor::{GradStore, Precision, Scalar, Tape};

/// Samples per independent gradient job. Fixed so that the reduction order,
/// and therefore every bit of the result, does not depend on thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneScore {
    pub backbone_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Outcome of one training run. Wall time is kept out of the serialized
/// report so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: String,
    pub manifest_hash: String,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub splits: SplitSizes,
    pub param_counts: ParamCounts,
    pub epochs: Vec<EpochRecord>,
    pub final_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Per-backbone projection norms at initialization and at the end of
    /// training; present when the group penalty is active.
    pub initial_importance: Option<Vec<BackboneScore>>,
    pub importance: Option<Vec<BackboneScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub report: TrainReport,
    pub params: AdapterParams<S>,
    pub wall_time: Duration,
}

/// Preprocessed inputs for one split.
pub struct SplitData<S: Scalar> {
    pub tokens: Vec<StackedTokens<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> SplitData<S> {
    pub fn prepare(dataset: &FeatureDataset, selection: &FeatureSelection, split: Split) -> Result<Self> {
        let range = dataset.split_indices(split);
        Ok(SplitData {
            tokens: selection.prepare(dataset, range.clone())?,
            labels: dataset.manifest().labels[range].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient of `Σ_i CE_i / batch_total + λ·Σ s_k` over the samples at
/// `indices`, and the value of that objective.
pub fn batch_gradients<S: Scalar>(
    params: &AdapterParams<S>,
    data: &SplitData<S>,
    indices: &[usize],
    lambda: f64,
    groups: &BackboneRows,
) -> Result<(f64, GradStore<S>)> {
    let batch = S::of(indices.len() as f64);
    let parts: Vec<Result<(f64, GradStore<S>)>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = params.store().register(&mut tape);
            let samples: Vec<&StackedTokens<S>> = chunk.iter().map(|&i| &data.tokens[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let logits = params.record_batch_logits(&mut tape, &vars, &samples)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            let share = tape.scale(ce, S::of(chunk.len() as f64) / batch);
            let value = tape.value(share).item().to_f64().unwrap();
            Ok((value, tape.backward(share)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = GradStore::default();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(&g);
    }
    if lambda > 0.0 {
        let mut tape = Tape::new();
        let w = tape.param(params.projection_index(), params.projection());
        let penalty = record_group_penalty(&mut tape, w, groups, lambda)?;
        loss += tape.value(penalty).item().to_f64().unwrap();
        grads.accumulate(&tape.backward(penalty)?);
    }
    Ok((loss, grads))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<S: Scalar>(params: &AdapterParams<S>, data: &SplitData<S>) -> Result<f64> {
    if data.is_empty() {
        return Err(ComboError::Data("cannot evaluate an empty split".into()));
    }
    let correct: Vec<Result<bool>> = data
        .tokens
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(t, &y)| Ok(argmax(params.logits(t)?.data()) == y))
        .collect();
    let mut n = 0usize;
    for c in correct {
        n += c? as usize;
    }
    Ok(n as f64 / data.len() as f64)
}

fn scores(
    weight: &crate::tensor::Tensor<impl Scalar>,
    groups: &BackboneRows,
) -> Result<Vec<BackboneScore>> {
    Ok(group_norms(weight, groups)?
        .into_iter()
        .zip(groups)
        .map(|(score, (id, _))| BackboneScore {
            backbone_id: id.clone(),
            score,
        })
        .collect())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains the adapter on the train split, tracking validation accuracy every
/// epoch. Runs the full schedule; the returned parameters are the final
/// epoch's.
pub fn train<S: Scalar>(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    let start = Instant::now();
    config.validate()?;
    let manifest = dataset.manifest();
    let (resolved, selection) = adapter.resolve(manifest)?;
    if manifest.splits.train == 0 || manifest.splits.val == 0 {
        return Err(ComboError::Data(format!(
            "training needs non-empty train and val splits, got {} / {}",
            manifest.splits.train, manifest.splits.val
        )));
    }
    let train_data = SplitData::<S>::prepare(dataset, &selection, Split::Train)?;
    let val_data = SplitData::<S>::prepare(dataset, &selection, Split::Val)?;
    let groups = selection.backbone_rows();

    let mut params = AdapterParams::<S>::init(
        &resolved,
        selection.total_dim(),
        selection.target_tokens(),
        config.seed,
    )?;
    let initial_importance = (config.lambda_reg > 0.0)
        .then(|| scores(params.projection(), &groups))
        .transpose()?;

    let hyper = AdamWHyper {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };
    let mut state = AdamWState::new(params.store());
    let steps_per_epoch = train_data.len().div_ceil(config.batch_size);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = lr_at(step, config, steps_per_epoch);
            let (loss, grads) = batch_gradients(&params, &train_data, batch, config.lambda_reg, &groups)?;
            if !loss.is_finite() {
                return Err(ComboError::InvalidState(format!(
                    "non-finite loss at epoch {} step {step}",
                    epoch + 1
                )));
            }
            loss_sum += loss * batch.len() as f64;
            params.store_mut().set_grads(&grads);
            adamw_step(params.store_mut(), &mut state, lr, &hyper);
            step += 1;
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_data.len() as f64,
            val_accuracy: evaluate(&params, &val_data)?,
            lr,
        });
    }

    let test_accuracy = if manifest.splits.test > 0 {
        let test_data = SplitData::<S>::prepare(dataset, &selection, Split::Test)?;
        Some(evaluate(&params, &test_data)?)
    } else {
        None
    };
    let importance = (config.lambda_reg > 0.0)
        .then(|| scores(params.projection(), &groups))
        .transpose()?;

    let report = TrainReport {
        dataset: manifest.name.clone(),
        manifest_hash: hex(&manifest.hash()),
        adapter: resolved,
        train: config.clone(),
        splits: SplitSizes {
            train: manifest.splits.train,
            val: manifest.splits.val,
            test: manifest.splits.test,
        },
        param_counts: params.count_parameters(),
        final_val_accuracy: epochs.last().expect("epochs >= 1").val_accuracy,
        epochs,
        test_accuracy,
        initial_importance,
        importance,
        run_config: None,
    };
    Ok(TrainOutcome {
        report,
        params,
        wall_time: start.elapsed(),
    })
}

/// [`train`] at the configured precision, packaged with a checkpoint.
pub fn run_training(
    dataset: &FeatureDataset,
    adapter: &AdapterConfig,
    config: &TrainConfig,
) -> Result<(TrainReport, Checkpoint, Duration)> {
    fn pack<S: Scalar>(o: TrainOutcome<S>, ds: &FeatureDataset) -> (TrainReport, Checkpoint, Duration) {
        let ck = Checkpoint::new(&o.params, ds.manifest());
        (o.report, ck, o.wall_time)
    }
    Ok(match config.precision {
        Precision::F32 => pack(train::<f32>(dataset, adapter, config)?, dataset),
        Precision::F64 => pack(train::<f64>(dataset, adapter, config)?, dataset),
    })
}

/// Accuracy of a checkpoint on one split of `dataset`.
pub fn evaluate_checkpoint(
    dataset: &FeatureDataset,
    checkpoint: &Checkpoint,
    split: Split,
    precision: Precision,
) -> Result<f64> {
    fn run<S: Scalar>(ds: &FeatureDataset, ck: &Checkpoint, split: Split) -> Result<f64> {
        let params = ck.params_for::<S>(ds.manifest())?;
        let (_, selection) = params.config().resolve(ds.manifest())?;
        let data = SplitData::<S>::prepare(ds, &selection, split)?;
        evaluate(&params, &data)
    }
    match precision {
        Precision::F32 => run::<f32>(dataset, checkpoint, split),
        Precision::F64 => run::<f64>(dataset, checkpoint, split),
    }
}
