use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::AdapterConfig;
use crate::error::{ComboError, Result};
use crate::features::StackedTokens;
use crate::tensor::{ParamStore, Parameter, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSlots {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Store indices of every named adapter parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slots {
    proj_w: usize,
    proj_b: usize,
    cls: usize,
    pos: Option<usize>,
    blocks: Vec<BlockSlots>,
    norm_w: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Parameter group used for counting and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Projection,
    ClsPos,
    Transformer,
    Head,
}

/// Exact parameter counts per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub projection: usize,
    pub cls_pos: usize,
    pub transformer: usize,
    pub head: usize,
    pub total: usize,
}

pub fn param_group(id: &str) -> ParamGroup {
    if id.starts_with("proj.") {
        ParamGroup::Projection
    } else if id == "cls_token" || id == "pos_embed" {
        ParamGroup::ClsPos
    } else if id.starts_with("head.") {
        ParamGroup::Head
    } else {
        ParamGroup::Transformer
    }
}

/// Weight matrices take decoupled weight decay; biases, norms, the class
/// token and positional embeddings do not.
pub fn decays(id: &str) -> bool {
    id.ends_with(".weight") && !id.contains("norm")
}

fn block_id(i: usize, name: &str) -> String {
    format!("blocks.{i}.{name}")
}

/// Expected parameter ids and shapes for a resolved configuration.
fn param_specs(config: &AdapterConfig, input_dim: usize, tokens: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hidden = d * config.mlp_ratio;
    let classes = config.num_classes.expect("resolved config");
    let mut specs = vec![
        ("proj.weight".to_string(), vec![input_dim, d]),
        ("proj.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
    ];
    if config.use_positional_embedding {
        specs.push(("pos_embed".into(), vec![tokens + 1, d]));
    }
    for i in 0..config.depth {
        for (name, shape) in [
            ("norm1.weight", vec![d]),
            ("norm1.bias", vec![d]),
            ("attn.qkv.weight", vec![d, 3 * d]),
            ("attn.qkv.bias", vec![3 * d]),
            ("attn.proj.weight", vec![d, d]),
            ("attn.proj.bias", vec![d]),
            ("norm2.weight", vec![d]),
            ("norm2.bias", vec![d]),
            ("mlp.fc1.weight", vec![d, hidden]),
            ("mlp.fc1.bias", vec![hidden]),
            ("mlp.fc2.weight", vec![hidden, d]),
            ("mlp.fc2.bias", vec![d]),
        ] {
            specs.push((block_id(i, name), shape));
        }
    }
    specs.extend([
        ("norm.weight".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
        ("head.weight".to_string(), vec![d, classes]),
        ("head.bias".to_string(), vec![classes]),
    ]);
    specs
}

/// Full trainable state of the adapter: projection `{W, b}`, class token,
/// positional embeddings, transformer blocks and the linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<S: Scalar> {
    store: ParamStore<S>,
    slots: Slots,
    config: AdapterConfig,
    input_dim: usize,
    tokens: usize,
}

/// Truncated normal at ±2σ.
fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<S: Scalar> AdapterParams<S> {
    /// Initializes parameters for a resolved `config` over stacked inputs of
    /// `tokens × input_dim`.
    ///
    /// Projection, class token, positional embeddings and attention/MLP
    /// weights draw from a truncated normal with std 0.02; biases and the
    /// head weight start at zero; layer norms start at identity.
    pub fn init(config: &AdapterConfig, input_dim: usize, tokens: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_classes.is_none() {
            return Err(ComboError::Config("num_classes unresolved".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (id, shape) in param_specs(config, input_dim, tokens) {
            let value = if id.contains("norm") && id.ends_with(".weight") {
                Tensor::full(&shape, S::one())
            } else if id.ends_with(".bias") || id == "head.weight" {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| S::of(trunc_normal(&mut rng, INIT_STD)))
            };
            let decay = decays(&id);
            store.push(Parameter::new(id, value, decay))?;
        }
        Self::from_store(store, config.clone(), input_dim, tokens)
    }

    /// Wraps an existing store, checking every expected id and shape.
    pub fn from_store(
        store: ParamStore<S>,
        config: AdapterConfig,
        input_dim: usize,
        tokens: usize,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config, input_dim, tokens);
        if specs.len() != store.len() {
            return Err(ComboError::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                store.len()
            )));
        }
        for (id, shape) in &specs {
            let p = store
                .by_id(id)
                .ok_or_else(|| ComboError::Config(format!("missing parameter {id}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(ComboError::Config(format!(
                    "parameter {id} has shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
        }
        let at = |id: &str| store.position(id).expect("checked above");
        let slots = Slots {
            proj_w: at("proj.weight"),
            proj_b: at("proj.bias"),
            cls: at("cls_token"),
            pos: config.use_positional_embedding.then(|| at("pos_embed")),
            blocks: (0..config.depth)
                .map(|i| BlockSlots {
                    norm1_w: at(&block_id(i, "norm1.weight")),
                    norm1_b: at(&block_id(i, "norm1.bias")),
                    qkv_w: at(&block_id(i, "attn.qkv.weight")),
                    qkv_b: at(&block_id(i, "attn.qkv.bias")),
                    proj_w: at(&block_id(i, "attn.proj.weight")),
                    proj_b: at(&block_id(i, "attn.proj.bias")),
                    norm2_w: at(&block_id(i, "norm2.weight")),
                    norm2_b: at(&block_id(i, "norm2.bias")),
                    fc1_w: at(&block_id(i, "mlp.fc1.weight")),
                    fc1_b: at(&block_id(i, "mlp.fc1.bias")),
                    fc2_w: at(&block_id(i, "mlp.fc2.weight")),
                    fc2_b: at(&block_id(i, "mlp.fc2.bias")),
                })
                .collect(),
            norm_w: at("norm.weight"),
            norm_b: at("norm.bias"),
            head_w: at("head.weight"),
            head_b: at("head.bias"),
        };
        Ok(AdapterParams {
            store,
            slots,
            config,
            input_dim,
            tokens,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes.expect("resolved")
    }

    /// Store index of the projection weight `W`.
    pub fn projection_index(&self) -> usize {
        self.slots.proj_w
    }

    pub fn projection(&self) -> &Tensor<S> {
        &self.store.get(self.slots.proj_w).value
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut c = ParamCounts {
            projection: 0,
            cls_pos: 0,
            transformer: 0,
            head: 0,
            total: 0,
        };
        for p in self.store.iter() {
            let n = p.numel();
            match param_group(&p.id) {
                ParamGroup::Projection => c.projection += n,
                ParamGroup::ClsPos => c.cls_pos += n,
                ParamGroup::Transformer => c.transformer += n,
                ParamGroup::Head => c.head += n,
            }
            c.total += n;
        }
        c
    }

    pub fn cast<T: Scalar>(&self) -> AdapterParams<T> {
        AdapterParams {
            store: self.store.cast(),
            slots: self.slots.clone(),
            config: self.config.clone(),
            input_dim: self.input_dim,
            tokens: self.tokens,
        }
    }

    fn check_input(&self, stacked: &Tensor<S>) -> Result<()> {
        if stacked.shape() != [self.tokens, self.input_dim] {
            return Err(ComboError::Config(format!(
                "stacked tokens {:?} do not match adapter input [{}, {}]",
                stacked.shape(),
                self.tokens,
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Records the shared affine projection `t_i = S_i·W + b`.
    pub fn record_compress<'p>(
        &self,
        tape: &mut Tape<'p, S>,
        vars: &[Var],
        stacked: &'p Tensor<S>,
    ) -> Result<Var> {
        if stacked.shape().len() != 2 || stacked.shape()[1] != self.input_dim {
            return Err(ComboError::Config(format!(
                "stacked dimension {:?} does not match projection rows {}",
                stacked.shape(),
                self.input_dim
            )));
        }
        let s = tape.input_ref(stacked);
        tape.affine(s, vars[self.slots.proj_w], vars[self.slots.proj_b])
    }

    /// Records the forward pass for one sample and returns its `1×C` logits.
    ///
    /// Blocks are pre-norm. The last block evaluates attention queries and
    /// the MLP for the class-token row only, since no other row reaches the
    /// head.
    pub fn record_logits<'p>(
        &self,
        tape: &mut Tape<'p, S>,
        vars: &[Var],
        stacked: &'p Tensor<S>,
    ) -> Result<Var> {
        self.check_input(stacked)?;
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let eps = S::of(LAYER_NORM_EPS);
        let attn_scale = S::of(1.0 / (hd as f64).sqrt());

        let tokens = self.record_compress(tape, vars, stacked)?;
        let cls = tape.reshape(vars[self.slots.cls], vec![1, d])?;
        let mut x = tape.concat_rows(&[cls, tokens])?;
        if let Some(pos) = self.slots.pos {
            x = tape.add(x, vars[pos])?;
        }

        let depth = self.slots.blocks.len();
        for (bi, b) in self.slots.blocks.iter().enumerate() {
            let last = bi + 1 == depth;
            let h = tape.layer_norm(x, vars[b.norm1_w], vars[b.norm1_b], eps)?;
            let qkv = tape.affine(h, vars[b.qkv_w], vars[b.qkv_b])?;
            let mut head_out = Vec::with_capacity(heads);
            for hi in 0..heads {
                let mut q = tape.slice_cols(qkv, hi * hd, hd)?;
                if last {
                    q = tape.slice_rows(q, 0, 1)?;
                }
                let k = tape.slice_cols(qkv, d + hi * hd, hd)?;
                let v = tape.slice_cols(qkv, 2 * d + hi * hd, hd)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, attn_scale);
                let attn = tape.softmax(scores);
                head_out.push(tape.matmul(attn, v)?);
            }
            let merged = if heads == 1 {
                head_out[0]
            } else {
                tape.concat_cols(&head_out)?
            };
            let attn_out = tape.affine(merged, vars[b.proj_w], vars[b.proj_b])?;
            let residual = if last { tape.slice_rows(x, 0, 1)? } else { x };
            x = tape.add(residual, attn_out)?;

            let h = tape.layer_norm(x, vars[b.norm2_w], vars[b.norm2_b], eps)?;
            let h = tape.affine(h, vars[b.fc1_w], vars[b.fc1_b])?;
            let h = tape.gelu(h);
            let h = tape.affine(h, vars[b.fc2_w], vars[b.fc2_b])?;
            x = tape.add(x, h)?;
        }

        let o_cls = tape.layer_norm(x, vars[self.slots.norm_w], vars[self.slots.norm_b], eps)?;
        tape.affine(o_cls, vars[self.slots.head_w], vars[self.slots.head_b])
    }

    /// Records logits for several samples and stacks them into `B×C`.
    pub fn record_batch_logits<'p>(
        &self,
        tape: &mut Tape<'p, S>,
        vars: &[Var],
        samples: &[&'p StackedTokens<S>],
    ) -> Result<Var> {
        let rows = samples
            .iter()
            .map(|s| self.record_logits(tape, vars, &s.data))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    /// Compressed tokens `[T × D′]` for one sample.
    pub fn compress(&self, stacked: &StackedTokens<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape);
        let out = self.record_compress(&mut tape, &vars, &stacked.data)?;
        Ok(tape.value(out).clone())
    }

    /// Logits `[C]` for one sample.
    pub fn logits(&self, stacked: &StackedTokens<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape);
        let out = self.record_logits(&mut tape, &vars, &stacked.data)?;
        tape.value(out).clone().reshape(vec![self.num_classes()])
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, stacked: &StackedTokens<S>) -> Result<usize> {
        Ok(argmax(self.logits(stacked)?.data()))
    }
}

pub(crate) fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
