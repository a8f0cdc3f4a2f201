use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use openmm::autodiff::{AdamConfig, AdamState, Graph};
use openmm::data::{generate_benchmark, SyntheticConfig};
use openmm::harness::{build_net, permutation_set};
use openmm::objective::{total_loss_dg, Batch, TrainConfig};
use openmm::pretext::recompose;
use openmm::{seeded, Matrix};
use rand::Rng as _;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    for n in [16, 64, 128] {
        let a = random(n, n, 1);
        let b = random(n, n, 2);
        c.bench_function(&format!("matmul {n}x{n}"), |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    }
}

fn jigsaw_recompose(c: &mut Criterion) {
    let embs = [random(16, 64, 3), random(16, 64, 4), random(16, 64, 5)];
    let perm: Vec<usize> = (0..12).rev().collect();
    c.bench_function("recompose 3x64, 4 parts", |bench| bench.iter(|| recompose(black_box(&embs), 4, &perm).unwrap()));
}

/// One mini-batch of the reference benchmark with the default config.
fn reference_batch() -> (TrainConfig, openmm::net::MultimodalNet, openmm::pretext::PermutationSet, Batch) {
    let cfg = TrainConfig::default();
    let bench = generate_benchmark(&SyntheticConfig::default()).unwrap();
    let ds = &bench.sources[0];
    let idx: Vec<usize> = (0..cfg.batch_size).map(|i| i * ds.len() / cfg.batch_size).collect();
    let labels = idx.iter().map(|&i| ds.samples[i].label.known().unwrap()).collect();
    let batch = Batch {
        inputs: ds.modality_matrices(&idx),
        labels: Some(labels),
    };
    let net = build_net(&cfg, &ds.meta).unwrap();
    let perms = permutation_set(&cfg, ds.num_modalities()).unwrap();
    (cfg, net, perms, batch)
}

fn objective(c: &mut Criterion) {
    let (cfg, net, perms, batch) = reference_batch();
    let mut rng = seeded(0);
    c.bench_function("total loss forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            total_loss_dg(&mut g, &net, &batch, &cfg, &perms, &mut rng).unwrap().1.total
        })
    });
}

fn training_step(c: &mut Criterion) {
    let (cfg, mut net, perms, batch) = reference_batch();
    let mut adam = AdamState::new(&net.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = seeded(0);
    c.bench_function("training step (forward, backward, adam)", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (loss, _) = total_loss_dg(&mut g, &net, &batch, &cfg, &perms, &mut rng).unwrap();
            let grads = g.backward(loss, &net.params).unwrap();
            adam.step(&mut net.params, &grads).unwrap();
        })
    });
}

criterion_group!(benches, matmul, jigsaw_recompose, objective, training_step);
criterion_main!(benches);
