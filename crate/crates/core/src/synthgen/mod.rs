//! Seeded synthetic feature datasets with planted label signal.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ComboError, Result};
use crate::features::{BackboneMeta, FeatureDataset, Manifest, Protocol, Splits, MANIFEST_VERSION};

/// How a label is written into a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Class prototype added to every token.
    PooledLinear,
    /// One shared pattern added to every token of a class-dependent cell;
    /// cells have equal size, so pooled statistics carry no class
    /// information.
    SpatialPosition,
    /// The shared pattern added at `class + 1` random distinct cells.
    SpatialCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBackbone {
    pub backbone_id: String,
    pub layer_ids: Vec<u32>,
    pub tokens: usize,
    pub dim: usize,
    /// Reuse another backbone's maps verbatim; layouts must agree.
    #[serde(default)]
    pub copy_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlacement {
    pub backbone_id: String,
    pub layer_id: u32,
    /// Signal amplitude in units of the noise standard deviation.
    pub snr: f64,
    pub encoding: Encoding,
    /// Tokens per spatial-position cell; defaults to `⌊T/C⌋`, so the C cells
    /// tile the grid in raster order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub num_classes: usize,
    pub splits: Splits,
    #[serde(default)]
    pub protocol: Protocol,
    pub backbones: Vec<SynthBackbone>,
    #[serde(default)]
    pub signals: Vec<SignalPlacement>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(name: impl Into<String>, num_classes: usize, splits: Splits, seed: u64) -> Self {
        SynthSpec {
            name: name.into(),
            num_classes,
            splits,
            protocol: Protocol::Custom,
            backbones: Vec::new(),
            signals: Vec::new(),
            noise_std: 1.0,
            seed,
        }
    }

    /// Adds a backbone with layers `1..=layers`.
    pub fn backbone(mut self, id: &str, layers: u32, tokens: usize, dim: usize) -> Self {
        self.backbones.push(SynthBackbone {
            backbone_id: id.into(),
            layer_ids: (1..=layers).collect(),
            tokens,
            dim,
            copy_of: None,
        });
        self
    }

    pub fn copy(mut self, id: &str, of: &str) -> Self {
        let src = self
            .backbones
            .iter()
            .find(|b| b.backbone_id == of)
            .expect("copy source declared first")
            .clone();
        self.backbones.push(SynthBackbone {
            backbone_id: id.into(),
            copy_of: Some(of.into()),
            ..src
        });
        self
    }

    pub fn signal(mut self, id: &str, layer: u32, snr: f64, encoding: Encoding) -> Self {
        self.signals.push(SignalPlacement {
            backbone_id: id.into(),
            layer_id: layer,
            snr,
            encoding,
            cell_tokens: None,
        });
        self
    }

    /// Sets the cell size of the most recently added signal.
    pub fn cell_tokens(mut self, tokens: usize) -> Self {
        self.signals.last_mut().expect("a signal was added").cell_tokens = Some(tokens);
        self
    }

    fn find(&self, id: &str) -> Option<&SynthBackbone> {
        self.backbones.iter().find(|b| b.backbone_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ComboError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and ≥ 0, got {}", self.noise_std));
        }
        if self.backbones.is_empty() {
            return bad("no backbones".into());
        }
        for b in &self.backbones {
            BackboneMeta::new(b.backbone_id.clone(), b.layer_ids.clone(), b.tokens, b.dim)?;
            if let Some(src) = &b.copy_of {
                let Some(s) = self.find(src) else {
                    return bad(format!("{} copies unknown backbone {src}", b.backbone_id));
                };
                if s.copy_of.is_some() {
                    return bad(format!("{} copies a copy ({src})", b.backbone_id));
                }
                if (&s.layer_ids, s.tokens, s.dim) != (&b.layer_ids, b.tokens, b.dim) {
                    return bad(format!("{} and its source {src} differ in layout", b.backbone_id));
                }
            }
        }
        for s in &self.signals {
            let Some(b) = self.find(&s.backbone_id) else {
                return bad(format!("signal on unknown backbone {}", s.backbone_id));
            };
            if b.copy_of.is_some() {
                return bad(format!("signal on copied backbone {}", s.backbone_id));
            }
            if !b.layer_ids.contains(&s.layer_id) {
                return bad(format!("backbone {} has no layer {}", s.backbone_id, s.layer_id));
            }
            if !(s.snr > 0.0 && s.snr.is_finite()) {
                return bad(format!("snr must be positive, got {}", s.snr));
            }
            if let Some(l) = s.cell_tokens {
                if s.encoding != Encoding::SpatialPosition {
                    return bad("cell_tokens applies to spatial-position only".into());
                }
                if l == 0 || l > b.tokens / self.num_classes {
                    return bad(format!(
                        "cell_tokens must be in 1..={} on backbone {}",
                        b.tokens / self.num_classes,
                        s.backbone_id
                    ));
                }
            }
            if s.encoding != Encoding::PooledLinear && self.num_classes > b.tokens {
                return bad(format!(
                    "spatial-count needs at most {} classes on backbone {}",
                    b.tokens, s.backbone_id
                ));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

/// Class-balanced labels, shuffled independently within each split.
fn make_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(spec.splits.total());
    for n in [spec.splits.train, spec.splits.val, spec.splits.test] {
        let mut part: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        part.shuffle(rng);
        labels.extend(part);
    }
    labels
}

/// Tokens that carry the pattern for `class` under spatial-position: a run
/// of `cell` tokens centred in the class's slot of width `⌊T/C⌋`.
pub fn position_cell(class: usize, classes: usize, tokens: usize, cell: usize) -> std::ops::Range<usize> {
    let slot = tokens / classes;
    let start = class * slot + (slot - cell) / 2;
    start..start + cell
}

fn render_map(
    spec: &SynthSpec,
    b: &SynthBackbone,
    signals: &[(&SignalPlacement, Vec<Vec<f64>>)],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (t, d) = (b.tokens, b.dim);
    let mut out = Vec::with_capacity(labels.len() * t * d);
    let mut sample = vec![0.0f64; t * d];
    for &y in labels {
        for v in sample.iter_mut() {
            *v = normal(rng, spec.noise_std);
        }
        for (placement, protos) in signals {
            match placement.encoding {
                Encoding::PooledLinear => {
                    for row in sample.chunks_mut(d) {
                        row.iter_mut().zip(&protos[y]).for_each(|(v, p)| *v += p);
                    }
                }
                Encoding::SpatialPosition => {
                    let cell = placement.cell_tokens.unwrap_or(t / spec.num_classes);
                    for i in position_cell(y, spec.num_classes, t, cell) {
                        let row = &mut sample[i * d..(i + 1) * d];
                        row.iter_mut().zip(&protos[0]).for_each(|(v, p)| *v += p);
                    }
                }
                Encoding::SpatialCount => {
                    for cell in index::sample(rng, t, y + 1).into_iter() {
                        let row = &mut sample[cell * d..(cell + 1) * d];
                        row.iter_mut().zip(&protos[0]).for_each(|(v, p)| *v += p);
                    }
                }
            }
        }
        out.extend(sample.iter().map(|&v| v as f32));
    }
    out
}

/// Builds the dataset in memory. Pure in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    label_rng.set_stream(1);
    let labels = make_labels(spec, &mut label_rng);

    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proto_rng.set_stream(2);
    let prototypes: Vec<Vec<Vec<f64>>> = spec
        .signals
        .iter()
        .map(|s| {
            let dim = spec.find(&s.backbone_id).expect("validated").dim;
            let count = match s.encoding {
                Encoding::PooledLinear => spec.num_classes,
                _ => 1,
            };
            (0..count)
                .map(|_| (0..dim).map(|_| normal(&mut proto_rng, s.snr * spec.noise_std)).collect())
                .collect()
        })
        .collect();

    let mut maps: Vec<Vec<f32>> = Vec::new();
    let mut slot_of: Vec<(String, Vec<usize>)> = Vec::new();
    let mut stream = 16u64;
    for b in &spec.backbones {
        let mut slots = Vec::new();
        for &l in &b.layer_ids {
            if let Some(src) = &b.copy_of {
                let pos = b.layer_ids.iter().position(|&x| x == l).expect("own layer");
                let src_slot = slot_of.iter().find(|(id, _)| id == src).map(|(_, s)| s[pos]);
                let data = match src_slot {
                    Some(s) => maps[s].clone(),
                    None => {
                        return Err(ComboError::Config(format!(
                            "{} must follow its copy source {src}",
                            b.backbone_id
                        )))
                    }
                };
                slots.push(maps.len());
                maps.push(data);
                continue;
            }
            let placed: Vec<(&SignalPlacement, Vec<Vec<f64>>)> = spec
                .signals
                .iter()
                .zip(&prototypes)
                .filter(|(s, _)| s.backbone_id == b.backbone_id && s.layer_id == l)
                .map(|(s, p)| (s, p.clone()))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            stream += 1;
            slots.push(maps.len());
            maps.push(render_map(spec, b, &placed, &labels, &mut rng));
        }
        slot_of.push((b.backbone_id.clone(), slots));
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        name: spec.name.clone(),
        num_classes: spec.num_classes,
        num_samples: spec.splits.total(),
        protocol: spec.protocol,
        splits: spec.splits,
        backbones: spec
            .backbones
            .iter()
            .map(|b| BackboneMeta {
                backbone_id: b.backbone_id.clone(),
                layer_ids: b.layer_ids.clone(),
                tokens_per_map: b.tokens,
                embed_dim: b.dim,
            })
            .collect(),
        concat_order: spec.backbones.iter().map(|b| b.backbone_id.clone()).collect(),
        labels,
    };
    FeatureDataset::new(manifest, maps)
}

/// Generates and writes the dataset to `dir`.
pub fn generate_to_dir(spec: &SynthSpec, dir: &Path) -> Result<FeatureDataset> {
    let mut ds = generate(spec)?;
    ds.write(dir)?;
    ds.set_root(dir);
    Ok(ds)
}

#[cfg(test)]
mod tests;
