use std::hint::black_box;

use combo_core::adapter::{AdapterConfig, AdapterParams};
use combo_core::features::{interpolate_map, normalize_map, FeatureMap, Split, Splits};
use combo_core::synthgen::{generate, Encoding, SynthSpec};
use combo_core::training::{batch_gradients, SplitData};
use combo_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};

// Cheap deterministic fill; the values only need to be non-degenerate.
fn filled(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0)
}

fn matmul(c: &mut Criterion) {
    let a = filled(&[197, 768]);
    let b = filled(&[768, 64]);
    c.bench_function("matmul 197x768 @ 768x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn preprocess(c: &mut Criterion) {
    let map = FeatureMap::new("vit", 12, filled(&[196, 768])).unwrap();
    c.bench_function("interpolate 196 -> 256 tokens, dim 768", |bench| {
        bench.iter(|| interpolate_map(black_box(&map), 256).unwrap())
    });
    c.bench_function("normalize 196 x 768", |bench| bench.iter(|| normalize_map(black_box(&map))));
}

fn adapter(c: &mut Criterion) {
    let spec = SynthSpec::new("bench", 10, Splits { train: 64, val: 8, test: 0 }, 0)
        .backbone("a", 4, 196, 96)
        .backbone("b", 4, 144, 64)
        .signal("a", 3, 1.0, Encoding::SpatialCount);
    let ds = generate(&spec).unwrap();
    let (cfg, sel) = AdapterConfig::small(64, 2, 4).resolve(ds.manifest()).unwrap();
    let params = AdapterParams::<f32>::init(&cfg, sel.total_dim(), sel.target_tokens(), 0).unwrap();
    let data = SplitData::<f32>::prepare(&ds, &sel, Split::Train).unwrap();
    let groups = sel.backbone_rows();
    let batch: Vec<usize> = (0..data.len()).collect();

    c.bench_function("adapter forward, 1 sample", |bench| {
        bench.iter(|| params.logits(black_box(&data.tokens[0])).unwrap())
    });
    let mut group = c.benchmark_group("adapter");
    group.sample_size(10);
    group.bench_function("forward+backward, batch 64", |bench| {
        bench.iter(|| batch_gradients(&params, &data, black_box(&batch), 0.01, &groups).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, preprocess, adapter);
criterion_main!(benches);
