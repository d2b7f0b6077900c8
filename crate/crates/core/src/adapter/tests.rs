use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::StackedTokens;
use crate::tensor::{layer_norm, Tensor};

fn resolved(dim: usize, depth: usize, heads: usize, classes: usize) -> AdapterConfig {
    AdapterConfig {
        num_classes: Some(classes),
        ..AdapterConfig::small(dim, depth, heads)
    }
}

fn random_tokens(t: usize, d: usize, rng: &mut ChaCha8Rng) -> StackedTokens<f64> {
    StackedTokens {
        data: Tensor::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0)),
    }
}

/// Replaces every parameter with random values so no group is inert.
fn randomize(params: &mut AdapterParams<f64>, rng: &mut ChaCha8Rng) {
    for p in params.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn compress_zero_and_identity() {
    let cfg = resolved(4, 1, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = random_tokens(9, 4, &mut rng);
    let mut p = AdapterParams::<f64>::init(&cfg, 4, 9, 1).unwrap();
    let w = p.projection_index();
    p.store_mut().get_mut(w).value = Tensor::zeros(&[4, 4]);
    assert!(p.compress(&s).unwrap().data().iter().all(|&v| v == 0.0));
    p.store_mut().get_mut(w).value = Tensor::eye(4);
    assert_eq!(p.compress(&s).unwrap(), s.data);
}

#[test]
fn compress_matches_row_loop_oracle() {
    let cfg = resolved(6, 1, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_tokens(4, 10, &mut rng);
    let mut p = AdapterParams::<f64>::init(&cfg, 10, 4, 1).unwrap();
    randomize(&mut p, &mut rng);
    let out = p.compress(&s).unwrap();
    let w = p.store().by_id("proj.weight").unwrap().value.clone();
    let b = p.store().by_id("proj.bias").unwrap().value.clone();
    for i in 0..4 {
        for j in 0..6 {
            let mut acc = b.data()[j];
            for k in 0..10 {
                acc += s.data.row(i)[k] * w.data()[k * 6 + j];
            }
            assert!((out.row(i)[j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn compress_rejects_wrong_input_dim() {
    let cfg = resolved(4, 1, 2, 3);
    let p = AdapterParams::<f64>::init(&cfg, 8, 4, 1).unwrap();
    let s = StackedTokens {
        data: Tensor::zeros(&[4, 7]),
    };
    assert!(matches!(p.compress(&s), Err(crate::ComboError::Config(_))));
}

#[test]
fn zeroed_block_reduces_to_head_of_class_token() {
    let cfg = resolved(4, 1, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_tokens(4, 5, &mut rng);
    let mut p = AdapterParams::<f64>::init(&cfg, 5, 4, 3).unwrap();
    randomize(&mut p, &mut rng);
    for param in p.store_mut().iter_mut() {
        if param.id.starts_with("blocks.") {
            param.value = Tensor::zeros(param.value.shape());
        }
    }
    let get = |id: &str| p.store().by_id(id).unwrap().value.clone();
    let x0 = get("cls_token").add(&Tensor::new(vec![4], get("pos_embed").row(0).to_vec()).unwrap()).unwrap();
    let z = layer_norm(&x0, &get("norm.weight"), &get("norm.bias"), 1e-6).unwrap();
    let (hw, hb) = (get("head.weight"), get("head.bias"));
    let logits = p.logits(&s).unwrap();
    for c in 0..3 {
        let e: f64 = hb.data()[c] + (0..4).map(|j| z.data()[j] * hw.data()[j * 3 + c]).sum::<f64>();
        assert!((logits.data()[c] - e).abs() < 1e-12);
    }
}

#[test]
fn logits_ignore_token_order_without_positions() {
    let cfg = resolved(8, 2, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_tokens(9, 6, &mut rng);
    let mut p = AdapterParams::<f64>::init(&cfg, 6, 9, 4).unwrap();
    randomize(&mut p, &mut rng);
    let pos = p.store().position("pos_embed").unwrap();
    p.store_mut().get_mut(pos).value = Tensor::zeros(&[10, 8]);
    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted = StackedTokens {
        data: Tensor::new(
            vec![9, 6],
            perm.iter().flat_map(|&i| s.data.row(i).to_vec()).collect(),
        )
        .unwrap(),
    };
    let (a, b) = (p.logits(&s).unwrap(), p.logits(&permuted).unwrap());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn identical_samples_give_identical_rows() {
    let cfg = resolved(8, 2, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_tokens(4, 6, &mut rng);
    let mut p = AdapterParams::<f64>::init(&cfg, 6, 4, 4).unwrap();
    randomize(&mut p, &mut rng);
    let mut tape = crate::Tape::new();
    let vars = p.store().register(&mut tape);
    let out = p.record_batch_logits(&mut tape, &vars, &[&s, &s]).unwrap();
    let v = tape.value(out);
    assert_eq!(v.row(0), v.row(1));
}

#[test]
fn init_is_seeded_and_head_starts_at_zero() {
    let cfg = resolved(8, 1, 2, 5);
    let a = AdapterParams::<f64>::init(&cfg, 12, 4, 7).unwrap();
    let b = AdapterParams::<f64>::init(&cfg, 12, 4, 7).unwrap();
    let c = AdapterParams::<f64>::init(&cfg, 12, 4, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.projection(), c.projection());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = a.logits(&random_tokens(4, 12, &mut rng)).unwrap();
    assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    let w = a.projection().data();
    assert!(w.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    assert!(std > 0.012 && std < 0.025, "{std}");
}

#[test]
fn parameter_counts() {
    let cfg = AdapterConfig {
        num_classes: Some(100),
        ..AdapterConfig::default()
    };
    let p = AdapterParams::<f32>::init(&cfg, 9216, 196, 0).unwrap();
    let c = p.count_parameters();
    assert_eq!(c.projection, 9216 * 128 + 128);
    assert_eq!(c.projection, 1_179_776);
    assert_eq!(c.cls_pos, 128 + 197 * 128);
    assert_eq!(c.head, 128 * 100 + 100);
    assert_eq!(c.total, c.projection + c.cls_pos + c.transformer + c.head);
    // per block: 2 norms, qkv, proj, mlp; plus final norm
    let block = 4 * 128 + 128 * 384 + 384 + 128 * 128 + 128 + 128 * 512 + 512 + 512 * 128 + 128;
    assert_eq!(c.transformer, 6 * block + 2 * 128);

    let small = AdapterConfig {
        num_classes: Some(10),
        ..AdapterConfig::default()
    };
    let a = AdapterParams::<f32>::init(&small, 64, 4, 0).unwrap();
    let b = AdapterParams::<f32>::init(&small, 64, 4, 99).unwrap();
    assert_eq!(a.count_parameters().head, 1290);
    assert_eq!(a.count_parameters(), b.count_parameters());
}

#[test]
fn weight_decay_mask() {
    for id in ["proj.weight", "blocks.0.attn.qkv.weight", "blocks.3.mlp.fc2.weight", "head.weight"] {
        assert!(decays(id), "{id}");
    }
    for id in ["proj.bias", "cls_token", "pos_embed", "blocks.0.norm1.weight", "norm.weight", "head.bias"] {
        assert!(!decays(id), "{id}");
    }
}

#[test]
fn checkpoint_roundtrip_and_hash_check() {
    use crate::features::{BackboneMeta, Manifest, Protocol, Splits, MANIFEST_VERSION};
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        name: "ck".into(),
        num_classes: 3,
        num_samples: 2,
        protocol: Protocol::Custom,
        splits: Splits { train: 1, val: 1, test: 0 },
        backbones: vec![BackboneMeta::new("a", vec![1], 4, 6).unwrap()],
        concat_order: vec!["a".into()],
        labels: vec![0, 2],
    };
    let (cfg, sel) = AdapterConfig::small(4, 2, 2).resolve(&manifest).unwrap();
    let p = AdapterParams::<f32>::init(&cfg, sel.total_dim(), sel.target_tokens(), 11).unwrap();
    let ck = Checkpoint::new(&p, &manifest);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"CMBC");
    let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params_for::<f32>(&manifest).unwrap(), p);

    let mut other = manifest.clone();
    other.labels = vec![1, 2];
    assert!(back.params_for::<f32>(&other).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
}
