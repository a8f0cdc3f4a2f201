use nalgebra::DMatrix;
use openmm::data::{
    generate_benchmark, read_manifest, split, write_manifest, Dataset, Label, SyntheticConfig,
    SyntheticWorld,
};
use openmm::seeded;
use proptest::prelude::*;

fn reference() -> SyntheticConfig {
    SyntheticConfig {
        shift_magnitude: 0.5,
        noise_std: 0.1,
        ..SyntheticConfig::default()
    }
}

fn design(ds: &Dataset, modalities: &[usize]) -> DMatrix<f64> {
    let cols: usize = modalities.iter().map(|&k| ds.meta.modality_dims[k]).sum();
    DMatrix::from_fn(ds.len(), cols + 1, |i, j| {
        if j == cols {
            return 1.0;
        }
        let mut j = j;
        for &k in modalities {
            let f = &ds.samples[i].features[k];
            if j < f.len() {
                return f[j];
            }
            j -= f.len();
        }
        unreachable!()
    })
}

/// Ridge least squares `(XᵀX + λI)⁻¹ XᵀY`.
fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = x.ncols();
    let gram = x.transpose() * x + DMatrix::identity(n, n) * lambda;
    gram.cholesky().expect("positive definite").solve(&(x.transpose() * y))
}

#[test]
fn linear_probe_reaches_ninety_percent_on_held_out_source() {
    let b = generate_benchmark(&reference()).unwrap();
    let pooled = Dataset::concat(&b.sources).unwrap();
    let (train, val) = split(&pooled, 0.2, &mut seeded(1)).unwrap();
    let c = pooled.meta.num_classes();
    let all: Vec<usize> = (0..pooled.num_modalities()).collect();
    let x = design(&train, &all);
    let y = DMatrix::from_fn(train.len(), c, |i, j| {
        (train.samples[i].label == Label::Known(j)) as u8 as f64
    });
    let w = ridge(&x, &y, 1e-3);
    let scores = design(&val, &all) * w;
    let correct = (0..val.len())
        .filter(|&i| {
            let row = scores.row(i);
            let pred = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            val.samples[i].label == Label::Known(pred)
        })
        .count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc >= 0.9, "probe accuracy {acc}");
}

#[test]
fn cross_modal_linear_map_beats_mean_prediction() {
    let b = generate_benchmark(&reference()).unwrap();
    let pooled = Dataset::concat(&b.sources).unwrap();
    let (train, val) = split(&pooled, 0.3, &mut seeded(2)).unwrap();
    let target = |ds: &Dataset| {
        let d = ds.meta.modality_dims[1];
        DMatrix::from_fn(ds.len(), d, |i, j| ds.samples[i].features[1][j])
    };
    let w = ridge(&design(&train, &[0]), &target(&train), 1e-3);
    let yv = target(&val);
    let pred = design(&val, &[0]) * w;
    let mse = (&pred - &yv).norm_squared() / yv.len() as f64;
    let yt = target(&train);
    let mean = yt.row_mean();
    let baseline = (0..yv.nrows())
        .map(|i| (yv.row(i) - &mean).norm_squared())
        .sum::<f64>()
        / yv.len() as f64;
    assert!(mse < baseline, "mse {mse} vs mean baseline {baseline}");
}

#[test]
fn shift_free_class_means_agree_across_domains() {
    let cfg = SyntheticConfig {
        shift_magnitude: 0.0,
        noise_std: 0.0,
        ..SyntheticConfig::default()
    };
    let world = SyntheticWorld::new(&cfg).unwrap();
    for class in 0..cfg.total_classes() {
        for k in 0..cfg.num_modalities() {
            let base = world.class_feature_mean(class, 0, k);
            for d in 1..world.num_domains() {
                let other = world.class_feature_mean(class, d, k);
                for (a, b) in base.iter().zip(&other) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn sources_never_contain_unknown_samples() {
    let cfg = SyntheticConfig {
        n_known: 5,
        n_unknown: 3,
        n_sources: 3,
        ..SyntheticConfig::default()
    };
    let b = generate_benchmark(&cfg).unwrap();
    assert_eq!(b.sources.len(), 3);
    for s in &b.sources {
        assert!(!s.has_unknown());
    }
    let unknown = b.target.samples.iter().filter(|s| s.label.is_unknown()).count();
    assert_eq!(unknown, 3 * cfg.samples_per_class);
}

#[test]
fn manifest_round_trip_is_bitwise() {
    let b = generate_benchmark(&reference()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&b.target, dir.path()).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(back.samples.len(), b.target.samples.len());
    for (a, c) in back.samples.iter().zip(&b.target.samples) {
        assert_eq!(a.label, c.label);
        assert_eq!(a.domain, c.domain);
        for (fa, fc) in a.features.iter().zip(&c.features) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(fa), bits(fc));
        }
    }
    assert_eq!(back.meta, b.target.meta);
}

#[test]
fn invalid_config_names_the_field() {
    let err = generate_benchmark(&SyntheticConfig {
        noise_std: -1.0,
        ..SyntheticConfig::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("noise_std"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let cfg = SyntheticConfig { seed, samples_per_class: 3, ..SyntheticConfig::default() };
        let a = generate_benchmark(&cfg).unwrap();
        let b = generate_benchmark(&cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_is_stratified_and_lossless(seed in any::<u64>(), frac in 0.1f64..0.9) {
        let cfg = SyntheticConfig { samples_per_class: 6, n_sources: 1, ..SyntheticConfig::default() };
        let ds = generate_benchmark(&cfg).unwrap().sources.remove(0);
        let (train, val) = split(&ds, frac, &mut seeded(seed)).unwrap();
        prop_assert_eq!(train.len() + val.len(), ds.len());
        let mut all: Vec<_> = train.samples.iter().chain(&val.samples).map(|s| format!("{s:?}")).collect();
        let mut orig: Vec<_> = ds.samples.iter().map(|s| format!("{s:?}")).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
        for c in 0..ds.meta.num_classes() {
            let n_val = val.samples.iter().filter(|s| s.label == Label::Known(c)).count();
            prop_assert!((1..=5).contains(&n_val));
        }
    }
}
