use openmm::autodiff::Graph;
use openmm::net::{ArchConfig, EncoderKind, MultimodalNet};
use openmm::objective::{
    entmin_loss, entropy, entropy_weights, filter_known_targets, forward_heads, total_loss_da,
    total_loss_dg, weighted_cls_loss, Batch, TrainConfig, Toggles,
};
use openmm::pretext::{build_permutation_set, PermutationSet};
use openmm::{seeded, Matrix};
use proptest::prelude::*;
use rand::Rng as _;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        embed_dim: 4,
        jigsaw_parts: 2,
        jigsaw_permutations: 6,
        jigsaw_hidden: 8,
        ..TrainConfig::default()
    }
}

fn setup(seed: u64) -> (MultimodalNet, PermutationSet, Batch) {
    let c = cfg();
    let net = MultimodalNet::new(
        ArchConfig {
            input_dims: vec![5, 3],
            embed_dims: vec![c.embed_dim; 2],
            num_classes: 3,
            num_permutations: c.jigsaw_permutations,
            encoder: EncoderKind::Mlp { hidden_layers: 1 },
            translator_hidden: None,
            jigsaw_hidden: c.jigsaw_hidden,
        },
        &mut seeded(seed),
    )
    .unwrap();
    let perms = build_permutation_set(2, c.jigsaw_parts, c.jigsaw_permutations, &mut seeded(seed + 1)).unwrap();
    let batch = Batch {
        inputs: vec![random(6, 5, seed + 2), random(6, 3, seed + 3)],
        labels: Some(vec![0, 1, 2, 0, 1, 2]),
    };
    (net, perms, batch)
}

fn unlabeled(b: &Batch) -> Batch {
    Batch {
        inputs: b.inputs.clone(),
        labels: None,
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn entropy_examples() {
    let (_, h) = entropy(&Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap()).unwrap();
    assert_eq!(h, 0.0);
    let (_, h) = entropy(&Matrix::filled(3, 8, 0.125)).unwrap();
    assert!((h - 8f64.ln()).abs() <= 1e-12);
    let (_, h) = entropy(&Matrix::from_rows(&[[0.5, 0.5]]).unwrap()).unwrap();
    assert!((h - 0.69315).abs() <= 1e-5);
}

#[test]
fn weighted_classification_example() {
    // Weights [2/3, 1/3] on per-head CEs 1.0 and 2.0 give 4/3.
    let w = entropy_weights(&[0.0, 2f64.ln()], 1.0).unwrap();
    assert!((w[0] - 2.0 / 3.0).abs() <= 1e-12 && (w[1] - 1.0 / 3.0).abs() <= 1e-12);
    assert!((w[0] * 1.0 + w[1] * 2.0 - 4.0 / 3.0).abs() <= 1e-12);
}

#[test]
fn weighted_classification_uses_head_entropies() {
    let mut g = Graph::new();
    let confident = g.constant(Matrix::from_rows(&[[4.0, 0.0, 0.0], [0.0, 4.0, 0.0]]).unwrap());
    let flat = g.constant(Matrix::from_rows(&[[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]]).unwrap());
    let (loss, w) = weighted_cls_loss(&mut g, &[confident, flat], &[0, 1], 1.0, true).unwrap();
    assert!(w[0] > w[1]);
    let ce0 = g.cross_entropy(confident, &[0, 1]).unwrap();
    let ce1 = g.cross_entropy(flat, &[0, 1]).unwrap();
    let expected = w[0] * g.value(ce0).item() + w[1] * g.value(ce1).item();
    assert!((g.value(loss).item() - expected).abs() <= 1e-12);
}

#[test]
fn entmin_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Matrix::zeros(4, 5));
    let l = entmin_loss(&mut g, &[uniform, uniform]).unwrap();
    assert!((g.value(l).item() - 2.0 * 5f64.ln()).abs() <= 1e-12);
    let sharp = g.constant(Matrix::from_rows(&[[800.0, 0.0], [0.0, 800.0]]).unwrap());
    let l = entmin_loss(&mut g, &[sharp]).unwrap();
    assert!(g.value(l).item().abs() <= 1e-12);
}

#[test]
fn zero_alphas_reduce_to_classification() {
    let (net, perms, batch) = setup(1);
    let c = TrainConfig {
        alpha1: 0.0,
        alpha2: 0.0,
        alpha3: 0.0,
        ..cfg()
    };
    let mut g = Graph::new();
    let (total, parts) = total_loss_dg(&mut g, &net, &batch, &c, &perms, &mut seeded(5)).unwrap();
    let mut h = Graph::new();
    let fwd = forward_heads(&mut h, &net, &batch.inputs).unwrap();
    let (cls, _) = weighted_cls_loss(&mut h, &fwd.logits, batch.labels.as_ref().unwrap(), c.temperature, true).unwrap();
    assert_eq!(g.value(total).item().to_bits(), h.value(cls).item().to_bits());
    assert_eq!(parts.total.to_bits(), parts.cls.to_bits());
}

#[test]
fn total_decomposes_into_weighted_terms() {
    for seed in 0..10 {
        let (net, perms, batch) = setup(seed);
        let c = cfg();
        let mut g = Graph::new();
        let (_, p) = total_loss_dg(&mut g, &net, &batch, &c, &perms, &mut seeded(seed)).unwrap();
        let recombined = p.cls + c.alpha1 * p.masked_trans + c.alpha2 * p.muljig + c.alpha3 * p.entmin;
        assert!((p.total - recombined).abs() <= 1e-12);
        assert!(p.masked_trans > 0.0 && p.muljig > 0.0 && p.entmin > 0.0);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn classification_only_averages_heads_uniformly() {
    let (net, perms, batch) = setup(2);
    let c = TrainConfig {
        toggles: Toggles::all_off(),
        ..cfg()
    };
    let mut g = Graph::new();
    let (total, parts) = total_loss_dg(&mut g, &net, &batch, &c, &perms, &mut seeded(0)).unwrap();
    let mut h = Graph::new();
    let fwd = forward_heads(&mut h, &net, &batch.inputs).unwrap();
    let ces: f64 = fwd
        .logits
        .iter()
        .map(|&z| {
            let v = h.cross_entropy(z, batch.labels.as_ref().unwrap()).unwrap();
            h.value(v).item()
        })
        .sum();
    assert!((g.value(total).item() - ces / 3.0).abs() <= 1e-12);
    assert_eq!(parts.weights, vec![1.0 / 3.0; 3]);
    assert_eq!((parts.masked_trans, parts.muljig, parts.entmin), (0.0, 0.0, 0.0));
}

#[test]
fn unlabeled_source_batch_is_rejected() {
    let (net, perms, batch) = setup(3);
    let mut g = Graph::new();
    assert!(total_loss_dg(&mut g, &net, &unlabeled(&batch), &cfg(), &perms, &mut seeded(0)).is_err());
}

#[test]
fn da_without_target_is_dg() {
    let (net, perms, batch) = setup(4);
    let empty = Batch {
        inputs: vec![Matrix::zeros(0, 5), Matrix::zeros(0, 3)],
        labels: None,
    };
    let dg = {
        let mut g = Graph::new();
        total_loss_dg(&mut g, &net, &batch, &cfg(), &perms, &mut seeded(8)).unwrap().1
    };
    for (target, warmup) in [(None, false), (Some(&empty), false), (Some(&unlabeled(&batch)), true)] {
        let mut g = Graph::new();
        let (_, da) = total_loss_da(&mut g, &net, &batch, target, &cfg(), &perms, warmup, &mut seeded(8)).unwrap();
        assert_eq!(da, dg);
    }
}

#[test]
fn identical_source_and_target_contribute_equally() {
    let (net, perms, batch) = setup(5);
    let dg = {
        let mut g = Graph::new();
        total_loss_dg(&mut g, &net, &batch, &cfg(), &perms, &mut seeded(9)).unwrap().1
    };
    let mut g = Graph::new();
    let target = unlabeled(&batch);
    let (_, da) = total_loss_da(&mut g, &net, &batch, Some(&target), &cfg(), &perms, false, &mut seeded(9)).unwrap();
    assert!((da.masked_trans - 2.0 * dg.masked_trans).abs() <= 1e-12);
    assert!((da.muljig - 2.0 * dg.muljig).abs() <= 1e-12);
    assert!((da.entmin - 2.0 * dg.entmin).abs() <= 1e-12);
    assert_eq!(da.cls, dg.cls);
}

#[test]
fn labeled_target_batch_is_rejected() {
    let (net, perms, batch) = setup(6);
    let mut g = Graph::new();
    let err = total_loss_da(&mut g, &net, &batch, Some(&batch), &cfg(), &perms, false, &mut seeded(0)).unwrap_err();
    assert!(err.to_string().contains("target labels"), "{err}");
}

#[test]
fn filter_extremes() {
    let (net, _, batch) = setup(7);
    let (kept, rejected) = filter_known_targets(&net, &batch.inputs, 0.0).unwrap();
    assert_eq!((kept.len(), rejected.len()), (6, 0));
    let (kept, rejected) = filter_known_targets(&net, &batch.inputs, 1.0).unwrap();
    assert_eq!((kept.len(), rejected.len()), (0, 6));
    assert!(filter_known_targets(&net, &batch.inputs, 1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn entropy_weights_form_a_distribution(
        h in prop::collection::vec(0.0f64..5.0, 1..8),
        t in prop::sample::select(vec![0.1, 1.0, 10.0, 1e9]),
    ) {
        let w = entropy_weights(&h, t).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0 || t < 1.0));
        for i in 0..h.len() {
            for j in 0..h.len() {
                if h[i] < h[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
        if t == 1e9 {
            let u = 1.0 / h.len() as f64;
            prop_assert!(w.iter().all(|&x| (x - u).abs() <= 1e-6));
        }
    }

    #[test]
    fn filter_partitions_rows(seed in 0u64..50, tau in 0.0f64..=1.0) {
        let (net, _, batch) = setup(seed);
        let (mut kept, rejected) = filter_known_targets(&net, &batch.inputs, tau).unwrap();
        let out = net.infer(&batch.inputs).unwrap();
        for &i in &kept {
            let max = out.joint_probs.row(i).iter().copied().fold(0.0, f64::max);
            prop_assert!(max >= tau - 1e-12);
        }
        kept.extend(&rejected);
        kept.sort();
        prop_assert_eq!(kept, (0..6).collect::<Vec<_>>());
    }
}
