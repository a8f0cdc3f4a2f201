use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{AdamConfig, AdamState, Graph};
use crate::data::{split, Dataset, DatasetMeta, Label};
use crate::error::{Error, Result};
use crate::eval::{
    classify_openset, evaluate, fit_mahalanobis, score, score_histogram, EvalReport, ScoreMethod,
    HISTOGRAM_BINS,
};
use crate::net::{ArchConfig, EncoderKind, MultimodalNet};
use crate::objective::{total_loss_da, total_loss_dg, Batch, LossParts, TrainConfig};
use crate::pretext::{build_permutation_set, PermutationSet};
use crate::tensor::Matrix;
use crate::{child_seed, seeded, Rng};

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_PERMS: u64 = 3;
const STREAM_STEPS: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub losses: LossParts,
    pub val_acc: f64,
    /// Target samples that passed the confidence filter (DA only).
    pub target_kept: Option<usize>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected snapshot; `None` if no epoch ran.
    pub selected: Option<usize>,
}

impl TrainHistory {
    /// History without wall-clock timings, for determinism comparisons.
    pub fn without_timings(&self) -> TrainHistory {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.wall_clock_secs = 0.0;
        }
        h
    }
}

/// A trained model with the permutation set it was trained against.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: MultimodalNet,
    pub perm_set: PermutationSet,
    pub history: TrainHistory,
}

pub fn arch_for(cfg: &TrainConfig, meta: &DatasetMeta) -> ArchConfig {
    ArchConfig {
        input_dims: meta.modality_dims.clone(),
        embed_dims: vec![cfg.embed_dim; meta.num_modalities()],
        num_classes: meta.num_classes(),
        num_permutations: cfg.jigsaw_permutations,
        encoder: EncoderKind::Mlp {
            hidden_layers: cfg.encoder_hidden_layers,
        },
        translator_hidden: cfg.translator_hidden,
        jigsaw_hidden: cfg.jigsaw_hidden,
    }
}

/// Freshly initialized network for `cfg` and data described by `meta`.
pub fn build_net(cfg: &TrainConfig, meta: &DatasetMeta) -> Result<MultimodalNet> {
    let mut rng = seeded(child_seed(cfg.seed, STREAM_INIT));
    MultimodalNet::new(arch_for(cfg, meta), &mut rng)
}

pub fn permutation_set(cfg: &TrainConfig, modalities: usize) -> Result<PermutationSet> {
    let mut rng = seeded(child_seed(cfg.seed, STREAM_PERMS));
    build_permutation_set(modalities, cfg.jigsaw_parts, cfg.jigsaw_permutations, &mut rng)
}

fn known_labels(ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            ds.samples[i].label.known().ok_or_else(|| {
                Error::validation("sources", format!("sample {i} carries the unknown label"))
            })
        })
        .collect()
}

/// Closed-set accuracy of the joint head on a labeled dataset, in [0, 1].
pub fn validation_accuracy(net: &MultimodalNet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let out = net.infer(&ds.all_matrices())?;
    let preds = classify_openset(&out.joint_probs, &vec![0.0; ds.len()], f64::NEG_INFINITY)?;
    let correct = preds
        .iter()
        .zip(&ds.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn check_sources(sources: &[Dataset]) -> Result<Dataset> {
    let pooled = Dataset::concat(sources)?;
    if let Some(i) = pooled.samples.iter().position(|s| s.label.is_unknown()) {
        return Err(Error::validation(
            "sources",
            format!("pooled sample {i} carries the unknown label; sources must be closed-set"),
        ));
    }
    Ok(pooled)
}

fn mean_parts(acc: &[LossParts]) -> LossParts {
    let n = acc.len().max(1) as f64;
    let heads = acc.first().map_or(0, |p| p.weights.len());
    let mut out = LossParts {
        weights: vec![0.0; heads],
        ..LossParts::default()
    };
    for p in acc {
        out.cls += p.cls / n;
        out.masked_trans += p.masked_trans / n;
        out.muljig += p.muljig / n;
        out.entmin += p.entmin / n;
        out.total += p.total / n;
        for (w, v) in out.weights.iter_mut().zip(&p.weights) {
            *w += v / n;
        }
    }
    out
}

struct Trainer {
    cfg: TrainConfig,
    train: Dataset,
    val: Dataset,
    net: MultimodalNet,
    perm_set: PermutationSet,
    adam: AdamState,
    rng: Rng,
}

impl Trainer {
    fn new(cfg: &TrainConfig, sources: &[Dataset]) -> Result<Self> {
        cfg.validate()?;
        let pooled = check_sources(sources)?;
        let (train, val) = split(&pooled, cfg.val_fraction, &mut seeded(child_seed(cfg.seed, STREAM_SPLIT)))?;
        let net = build_net(cfg, &pooled.meta)?;
        let perm_set = permutation_set(cfg, pooled.num_modalities())?;
        let adam = AdamState::new(
            &net.params,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            train,
            val,
            net,
            perm_set,
            adam,
            rng: seeded(child_seed(cfg.seed, STREAM_STEPS)),
        })
    }

    fn source_batches(&mut self) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|idx| {
                Ok(Batch {
                    inputs: self.train.modality_matrices(idx),
                    labels: Some(known_labels(&self.train, idx)?),
                })
            })
            .collect()
    }

    fn apply(&mut self, g: &Graph, loss: crate::autodiff::Var, parts: &LossParts) -> Result<()> {
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", parts.total)));
        }
        let grads = g.backward(loss, &self.net.params)?;
        self.adam.step(&mut self.net.params, &grads)
    }

    /// Runs every epoch; `target_batches` supplies the filtered target
    /// batches for an epoch (or `None` for source-only epochs).
    fn run(
        mut self,
        mut target_batches: impl FnMut(&MultimodalNet, usize, &mut Rng) -> Result<Option<(Vec<Batch>, usize)>>,
    ) -> Result<Trained> {
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, MultimodalNet)> = None;
        for epoch in 1..=self.cfg.epochs {
            let start = Instant::now();
            let target = target_batches(&self.net, epoch, &mut self.rng)?;
            let batches = self.source_batches()?;
            let mut parts_acc = Vec::with_capacity(batches.len());
            for (i, batch) in batches.iter().enumerate() {
                let mut g = Graph::new();
                let (loss, parts) = match &target {
                    Some((tb, _)) if !tb.is_empty() => {
                        let t = &tb[i % tb.len()];
                        total_loss_da(&mut g, &self.net, batch, Some(t), &self.cfg, &self.perm_set, false, &mut self.rng)?
                    }
                    _ => total_loss_dg(&mut g, &self.net, batch, &self.cfg, &self.perm_set, &mut self.rng)?,
                };
                self.apply(&g, loss, &parts)?;
                parts_acc.push(parts);
            }
            let val_acc = validation_accuracy(&self.net, &self.val)?;
            if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
                best = Some((val_acc, self.net.clone()));
                history.selected = Some(history.epochs.len());
            }
            history.epochs.push(EpochRecord {
                epoch,
                losses: mean_parts(&parts_acc),
                val_acc,
                target_kept: target.map(|(_, kept)| kept),
                wall_clock_secs: start.elapsed().as_secs_f64(),
            });
        }
        let net = best.map_or(self.net, |(_, n)| n);
        Ok(Trained {
            net,
            perm_set: self.perm_set,
            history,
        })
    }
}

/// Trains on the pooled sources with the domain-generalization objective and
/// keeps the snapshot with the best source-validation accuracy.
pub fn train_dg(cfg: &TrainConfig, sources: &[Dataset]) -> Result<Trained> {
    Trainer::new(cfg, sources)?.run(|_, _, _| Ok(None))
}

/// Domain adaptation: after `warmup_epochs` source-only epochs, each epoch
/// re-filters the target with the current model and pairs every source
/// batch with a batch of confident target samples (cycled if fewer).
///
/// Only the target features are read; target labels never enter training.
pub fn train_da(cfg: &TrainConfig, sources: &[Dataset], target: &Dataset) -> Result<Trained> {
    let trainer = Trainer::new(cfg, sources)?;
    if target.meta.modality_dims != trainer.train.meta.modality_dims {
        return Err(Error::validation("target", "modality dims differ from the sources"));
    }
    let target_inputs = target.all_matrices();
    let warmup = cfg.warmup_epochs;
    let tau = cfg.tau;
    let batch_size = cfg.batch_size;
    trainer.run(move |net, epoch, rng| {
        if epoch <= warmup {
            return Ok(None);
        }
        let (mut kept, _) = crate::objective::filter_known_targets(net, &target_inputs, tau)?;
        kept.shuffle(rng);
        let batches = kept
            .chunks(batch_size)
            .map(|idx| Batch {
                inputs: target_inputs.iter().map(|m| m.select_rows(idx)).collect(),
                labels: None,
            })
            .collect();
        Ok(Some((batches, kept.len())))
    })
}

/// Target-domain predictions, scores and metrics.
#[derive(Clone, Debug)]
pub struct TargetEval {
    pub report: EvalReport,
    pub scores: Vec<f64>,
    pub predictions: Vec<Label>,
}

/// Scores the target with `method`, applies `threshold`, and computes the
/// open-set metrics. `fit_data` supplies labeled samples for methods that
/// need fitting (Mahalanobis).
pub fn evaluate_target(
    net: &MultimodalNet,
    target: &Dataset,
    method: ScoreMethod,
    threshold: f64,
    fit_data: Option<&Dataset>,
) -> Result<TargetEval> {
    let out = net.infer(&target.all_matrices())?;
    let state = match method {
        ScoreMethod::Mahalanobis => {
            let fit = fit_data.ok_or_else(|| Error::State("Mahalanobis needs labeled fit data".into()))?;
            let all: Vec<usize> = (0..fit.len()).collect();
            let emb = net.infer(&fit.all_matrices())?.embeddings;
            let refs: Vec<&Matrix> = emb.iter().collect();
            Some(fit_mahalanobis(&Matrix::hcat(&refs)?, &known_labels(fit, &all)?)?)
        }
        _ => None,
    };
    let refs: Vec<&Matrix> = out.embeddings.iter().collect();
    let joint = Matrix::hcat(&refs)?;
    let scores = score(method, &out.joint_logits, Some(&joint), state.as_ref())?;
    let predictions = classify_openset(&out.joint_probs, &scores, threshold)?;
    let truth = target.labels();
    let mut report = evaluate(&predictions, &truth, net.num_classes())?;
    report.histogram = Some(score_histogram(&scores, &truth, HISTOGRAM_BINS)?);
    Ok(TargetEval {
        report,
        scores,
        predictions,
    })
}

/// Writes the per-epoch training log CSV.
pub fn write_training_log(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let heads = history.epochs.first().map_or(0, |e| e.losses.weights.len());
    let mut header: Vec<String> = [
        "epoch",
        "l_cls",
        "l_masked_trans",
        "l_muljig",
        "l_entmin",
        "total",
        "val_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..heads).map(|k| format!("w_{k}")));
    w.write_record(&header)?;
    for e in &history.epochs {
        let l = &e.losses;
        let mut row = vec![
            e.epoch.to_string(),
            l.cls.to_string(),
            l.masked_trans.to_string(),
            l.muljig.to_string(),
            l.entmin.to_string(),
            l.total.to_string(),
            e.val_acc.to_string(),
        ];
        row.extend(l.weights.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
