//! End-to-end use of the public API: generate, persist, train, checkpoint,
//! reload, evaluate, score and probe.

use combo_core::adapter::{AdapterConfig, Checkpoint};
use combo_core::baselines::{layer_sweep, LinearProbeConfig};
use combo_core::features::{FeatureDataset, Split, Splits};
use combo_core::synthgen::{generate, generate_to_dir, Encoding, SynthSpec};
use combo_core::training::{evaluate_checkpoint, run_training, score_models, TrainConfig};
use combo_core::Precision;

fn spec() -> SynthSpec {
    SynthSpec::new("pipeline", 3, Splits { train: 96, val: 48, test: 24 }, 4)
        .backbone("wide", 3, 16, 12)
        .backbone("narrow", 2, 9, 6)
        .signal("wide", 2, 1.0, Encoding::PooledLinear)
}

fn quick(precision: Precision) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        warmup_epochs: 2,
        batch_size: 32,
        seed: 9,
        precision,
        ..TrainConfig::default()
    }
}

#[test]
fn train_checkpoint_reload_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    generate_to_dir(&spec(), &ds_dir).unwrap();
    let ds = FeatureDataset::read(&ds_dir).unwrap();
    let adapter = AdapterConfig::small(16, 1, 2);

    let (report, ck, _) = run_training(&ds, &adapter, &quick(Precision::F32)).unwrap();
    assert_eq!(report.epochs.len(), 15);
    assert!(report.final_val_accuracy > 0.9, "val {}", report.final_val_accuracy);

    let path = dir.path().join("model.cmbc");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    let val = evaluate_checkpoint(&ds, &back, Split::Val, Precision::F32).unwrap();
    assert_eq!(val, report.final_val_accuracy);
    let test = evaluate_checkpoint(&ds, &back, Split::Test, Precision::F32).unwrap();
    assert_eq!(Some(test), report.test_accuracy);
}

#[test]
fn double_precision_tracks_single_precision() {
    let ds = generate(&spec()).unwrap();
    let adapter = AdapterConfig::small(16, 1, 2);
    let single = run_training(&ds, &adapter, &quick(Precision::F32)).unwrap().0;
    let double = run_training(&ds, &adapter, &quick(Precision::F64)).unwrap().0;
    assert!((single.final_val_accuracy - double.final_val_accuracy).abs() <= 0.05);
    let drift = single
        .epochs
        .iter()
        .zip(&double.epochs)
        .map(|(a, b)| (a.train_loss - b.train_loss).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-2, "loss drift {drift}");
}

#[test]
fn scoring_and_probe_agree_on_the_informative_source() {
    let ds = generate(&spec()).unwrap();
    let scores = score_models(&ds, &AdapterConfig::small(16, 1, 2), &quick(Precision::F32), &[0, 1], 0.01).unwrap();
    assert_eq!(scores.ranking[0], "wide");
    assert_eq!(scores.per_seed.len(), 2);

    let curve = layer_sweep(&ds, "wide", &LinearProbeConfig::default()).unwrap();
    assert_eq!(curve.best_layer(), 2);
}
