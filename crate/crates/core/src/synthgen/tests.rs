use super::*;

fn splits(train: usize, val: usize) -> Splits {
    Splits { train, val, test: 0 }
}

fn pooled(ds: &FeatureDataset, sample: usize, id: &str, layer: u32, dim: usize) -> Vec<f64> {
    let data = ds.map_data(sample, id, layer).unwrap();
    let t = data.len() / dim;
    (0..dim)
        .map(|j| (0..t).map(|i| data[i * dim + j] as f64).sum::<f64>() / t as f64)
        .collect()
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = SynthSpec::new("d", 3, splits(12, 6), 9)
        .backbone("a", 2, 4, 5)
        .signal("a", 2, 1.0, Encoding::SpatialCount);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate_to_dir(&spec, d1.path()).unwrap();
    generate_to_dir(&spec, d2.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        assert_eq!(
            std::fs::read(d1.path().join(&n)).unwrap(),
            std::fs::read(d2.path().join(&n)).unwrap()
        );
    }
    let other = generate(&SynthSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(other, FeatureDataset::read(d1.path()).unwrap());
}

#[test]
fn labels_are_balanced_per_split() {
    let ds = generate(&SynthSpec::new("d", 4, splits(40, 20), 1).backbone("a", 1, 4, 2)).unwrap();
    let labels = &ds.manifest().labels;
    for range in [0..40, 40..60] {
        let n = range.len();
        let mut counts = [0; 4];
        for &l in &labels[range] {
            counts[l] += 1;
        }
        assert_eq!(counts, [n / 4; 4]);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SynthSpec::new("d", 3, splits(6, 3), 0).backbone("a", 2, 4, 2);
    assert!(base.clone().signal("b", 1, 1.0, Encoding::PooledLinear).validate().is_err());
    assert!(base.clone().signal("a", 3, 1.0, Encoding::PooledLinear).validate().is_err());
    assert!(base.clone().signal("a", 1, 0.0, Encoding::PooledLinear).validate().is_err());
    assert!(SynthSpec { num_classes: 5, ..base.clone() }
        .signal("a", 1, 1.0, Encoding::SpatialCount)
        .validate()
        .is_err());
    assert!(base.clone().backbone("x", 1, 5, 2).validate().is_err());
    assert!(base.clone().copy("c", "a").signal("c", 1, 1.0, Encoding::PooledLinear).validate().is_err());
    assert!(base.validate().is_ok());
}

#[test]
fn pooled_linear_without_noise_is_constant_per_class() {
    let spec = SynthSpec {
        noise_std: 0.0,
        ..SynthSpec::new("d", 3, splits(9, 3), 4)
    }
    .backbone("a", 1, 4, 3);
    let ds = generate(&spec).unwrap();
    assert!(ds.map_data(0, "a", 1).unwrap().iter().all(|&v| v == 0.0));

    let spec = SynthSpec::new("d", 3, splits(30, 3), 4)
        .backbone("a", 1, 16, 4)
        .signal("a", 1, 50.0, Encoding::PooledLinear);
    let ds = generate(&spec).unwrap();
    // With snr 50 the class prototype dominates: pooled vectors of equal
    // labels are much closer than pooled vectors of different labels.
    let labels = ds.manifest().labels.clone();
    let p: Vec<Vec<f64>> = (0..30).map(|i| pooled(&ds, i, "a", 1, 4)).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    for i in 0..30 {
        for j in 0..30 {
            if labels[i] == labels[j] {
                assert!(dist(&p[i], &p[j]) < 9.0);
            } else {
                assert!(dist(&p[i], &p[j]) > 100.0);
            }
        }
    }
}

#[test]
fn spatial_position_marks_the_class_cell() {
    let (t, d, c) = (16, 8, 4);
    let spec = SynthSpec {
        noise_std: 1e-3,
        ..SynthSpec::new("d", c, splits(8, 4), 2)
    }
    .backbone("a", 1, t, d)
    .signal("a", 1, 1000.0, Encoding::SpatialPosition)
    .cell_tokens(1);
    let ds = generate(&spec).unwrap();
    let cells: Vec<usize> = (0..c).map(|k| position_cell(k, c, t, 1).start).collect();
    assert_eq!(cells, vec![1, 5, 9, 13]);
    let mut pattern: Option<Vec<f32>> = None;
    for s in 0..12 {
        let data = ds.map_data(s, "a", 1).unwrap();
        let y = ds.label(s);
        let energy: Vec<f64> = (0..t)
            .map(|i| data[i * d..(i + 1) * d].iter().map(|&v| (v as f64).powi(2)).sum())
            .collect();
        let hot: Vec<usize> = (0..t).filter(|&i| energy[i] > 1e-2).collect();
        assert_eq!(hot, vec![cells[y]]);
        let row: Vec<f32> = data[cells[y] * d..(cells[y] + 1) * d].to_vec();
        match &pattern {
            None => pattern = Some(row),
            Some(p) => {
                let diff: f32 = p.iter().zip(&row).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                assert!(diff < 0.02, "shared pattern differs by {diff}");
            }
        }
    }
}

#[test]
fn default_cells_tile_the_grid() {
    let (t, d, c) = (16, 2, 3);
    assert_eq!(position_cell(2, c, t, 5), 10..15);
    assert_eq!(position_cell(1, c, t, 1), 7..8);
    let spec = SynthSpec {
        noise_std: 1e-3,
        ..SynthSpec::new("d", c, splits(6, 3), 2)
    }
    .backbone("a", 1, t, d)
    .signal("a", 1, 1000.0, Encoding::SpatialPosition);
    let ds = generate(&spec).unwrap();
    for s in 0..9 {
        let data = ds.map_data(s, "a", 1).unwrap();
        let hot: Vec<usize> = (0..t)
            .filter(|&i| data[i * d..(i + 1) * d].iter().map(|&v| (v as f64).powi(2)).sum::<f64>() > 1e-2)
            .collect();
        assert_eq!(hot, position_cell(ds.label(s), c, t, 5).collect::<Vec<_>>());
    }
    assert!(spec.clone().cell_tokens(6).validate().is_err());
    assert!(spec.clone().cell_tokens(0).validate().is_err());
}

#[test]
fn spatial_position_pooled_means_are_class_invariant() {
    // Per-class pooled means differ only by noise: each class mean of a
    // pooled coordinate has std σ/√(T·n_c); the difference of two has
    // std σ·√(2/(T·n_c)).
    let (t, d, c, n) = (16, 6, 4, 400);
    let spec = SynthSpec::new("d", c, splits(n, 4), 5)
        .backbone("a", 1, t, d)
        .signal("a", 1, 3.0, Encoding::SpatialPosition);
    let ds = generate(&spec).unwrap();
    let mut means = vec![vec![0.0; d]; c];
    for s in 0..n {
        let p = pooled(&ds, s, "a", 1, d);
        for j in 0..d {
            means[ds.label(s)][j] += p[j] / (n / c) as f64;
        }
    }
    let bound = 4.0 * (2.0 / (t * n / c) as f64).sqrt();
    for k in 1..c {
        for j in 0..d {
            assert!((means[k][j] - means[0][j]).abs() < bound, "class {k} dim {j}");
        }
    }
}

#[test]
fn spatial_count_marks_label_plus_one_cells() {
    let (t, d, c) = (9, 4, 3);
    let spec = SynthSpec {
        noise_std: 1e-3,
        ..SynthSpec::new("d", c, splits(9, 3), 8)
    }
    .backbone("a", 1, t, d)
    .signal("a", 1, 1000.0, Encoding::SpatialCount);
    let ds = generate(&spec).unwrap();
    for s in 0..12 {
        let data = ds.map_data(s, "a", 1).unwrap();
        let hot = (0..t)
            .filter(|&i| data[i * d..(i + 1) * d].iter().map(|&v| (v as f64).powi(2)).sum::<f64>() > 1e-2)
            .count();
        assert_eq!(hot, ds.label(s) + 1);
    }
}

#[test]
fn noise_maps_have_no_class_mean_difference() {
    let (t, d, c, n) = (4, 3, 2, 2000);
    let ds = generate(&SynthSpec::new("d", c, splits(n, 2), 3).backbone("a", 1, t, d)).unwrap();
    let mut means = vec![vec![0.0; d]; c];
    for s in 0..n {
        let p = pooled(&ds, s, "a", 1, d);
        for j in 0..d {
            means[ds.label(s)][j] += p[j] / (n / c) as f64;
        }
    }
    let bound = 3.0 * (2.0 / (t * n / c) as f64).sqrt();
    for j in 0..d {
        assert!((means[1][j] - means[0][j]).abs() < bound);
    }
}

#[test]
fn copies_are_verbatim() {
    let spec = SynthSpec::new("d", 2, splits(4, 2), 0)
        .backbone("a", 2, 4, 3)
        .signal("a", 1, 2.0, Encoding::PooledLinear)
        .copy("b", "a");
    let ds = generate(&spec).unwrap();
    for s in 0..6 {
        for l in [1, 2] {
            assert_eq!(ds.map_data(s, "a", l).unwrap(), ds.map_data(s, "b", l).unwrap());
        }
    }
    assert_eq!(ds.manifest().concat_order, vec!["a", "b"]);
}

#[test]
fn spec_json_is_strict() {
    let spec = SynthSpec::new("d", 2, splits(4, 2), 0).backbone("a", 1, 4, 3);
    let text = serde_json::to_string(&spec).unwrap();
    let back: SynthSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    let extra = text.replacen('{', "{\"bogus\":1,", 1);
    assert!(serde_json::from_str::<SynthSpec>(&extra).is_err());
}
