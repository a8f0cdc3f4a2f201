//! Loss composition: entropy-weighted multi-head classification, entropy
//! minimization, the pretext terms, and the DG / DA totals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::net::MultimodalNet;
use crate::pretext::{jigsaw_loss, masked_translation_loss, PermutationSet};
use crate::tensor::Matrix;

/// Which optional terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub jigsaw: bool,
    pub masked_translation: bool,
    pub entropy_weighting: bool,
    pub entropy_min: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Toggles {
    pub fn all_on() -> Self {
        Self {
            jigsaw: true,
            masked_translation: true,
            entropy_weighting: true,
            entropy_min: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            jigsaw: false,
            masked_translation: false,
            entropy_weighting: false,
            entropy_min: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub mask_ratio: f64,
    pub jigsaw_parts: usize,
    pub jigsaw_permutations: usize,
    pub temperature: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub warmup_epochs: usize,
    /// Width of every modality embedding.
    pub embed_dim: usize,
    /// ReLU layers in each encoder before its output layer.
    pub encoder_hidden_layers: usize,
    pub translator_hidden: Option<usize>,
    pub jigsaw_hidden: usize,
    /// Share of each source class held out for model selection.
    pub val_fraction: f64,
    /// Confidence threshold for the open-set decision at test time.
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 1.0,
            alpha3: 0.1,
            mask_ratio: 0.7,
            jigsaw_parts: 4,
            jigsaw_permutations: 128,
            temperature: 1.0,
            tau: 0.5,
            lr: 1e-4,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            toggles: Toggles::all_on(),
            warmup_epochs: 1,
            embed_dim: 64,
            encoder_hidden_layers: 1,
            translator_hidden: None,
            jigsaw_hidden: 128,
            val_fraction: 0.2,
            eval_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, r: String| Err(Error::validation(f, r));
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(a >= 0.0 && a.is_finite()) {
                return fail(name, format!("{a} must be finite and ≥ 0"));
            }
        }
        if !(self.temperature > 0.0) {
            return fail("temperature", format!("{} must be > 0", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau", format!("{} not in [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio", format!("{} not in [0, 1]", self.mask_ratio));
        }
        if self.jigsaw_parts < 1 {
            return fail("jigsaw_parts", "must be ≥ 1".into());
        }
        if self.jigsaw_permutations < 1 {
            return fail("jigsaw_permutations", "must be ≥ 1".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.jigsaw_parts) {
            return fail(
                "embed_dim",
                format!("{} must be positive and divisible by jigsaw_parts = {}", self.embed_dim, self.jigsaw_parts),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("{} must be finite and > 0", self.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction", format!("{} not in (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Scalar values of every term of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub masked_trans: f64,
    pub muljig: f64,
    pub entmin: f64,
    pub total: f64,
    /// Head weights `w_0..w_M`, joint head first.
    pub weights: Vec<f64>,
}

/// Per-row natural-log entropies and their batch mean. Rows must be
/// distributions within 1e-6.
pub fn entropy(probs: &Matrix) -> Result<(Vec<f64>, f64)> {
    let mut per_row = Vec::with_capacity(probs.rows());
    for (r, row) in probs.iter_rows().enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-12 || !p.is_finite()) {
            return Err(Error::validation(
                format!("probs row {r}"),
                format!("not a distribution (sum {total})"),
            ));
        }
        per_row.push(-row.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>());
    }
    let mean = per_row.iter().sum::<f64>() / per_row.len().max(1) as f64;
    Ok((per_row, mean))
}

/// Batch-mean entropy of softmax(logits), evaluated in log space.
pub fn mean_entropy_of_logits(logits: &Matrix) -> f64 {
    let p = softmax_rows(logits);
    let lp = log_softmax_rows(logits);
    let total: f64 = p
        .as_slice()
        .iter()
        .zip(lp.as_slice())
        .map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 })
        .sum();
    total / logits.rows().max(1) as f64
}

/// `w_k = exp(−H_k/T) / Σ_i exp(−H_i/T)`.
pub fn entropy_weights(entropies: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature", format!("{temperature} must be > 0")));
    }
    if entropies.is_empty() {
        return Err(Error::validation("entropies", "at least one head is required"));
    }
    let min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = entropies.iter().map(|h| (-(h - min) / temperature).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `Σ_k w_k · CE(ŷᵏ, y)` over the heads in `logits` (joint head first).
/// Weights are treated as constants in the backward pass; with
/// `weighting = false` every head gets `1/(M+1)`.
pub fn weighted_cls_loss(
    g: &mut Graph,
    logits: &[Var],
    labels: &[usize],
    temperature: f64,
    weighting: bool,
) -> Result<(Var, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::validation("heads", "at least one prediction head is required"));
    }
    let weights = if weighting {
        let h: Vec<f64> = logits.iter().map(|&z| mean_entropy_of_logits(g.value(z))).collect();
        entropy_weights(&h, temperature)?
    } else {
        vec![1.0 / logits.len() as f64; logits.len()]
    };
    Ok((fixed_weight_cls_loss(g, logits, labels, &weights)?, weights))
}

/// `Σ_k w_k · CE(ŷᵏ, y)` with caller-supplied weights.
pub fn fixed_weight_cls_loss(g: &mut Graph, logits: &[Var], labels: &[usize], weights: &[f64]) -> Result<Var> {
    if weights.len() != logits.len() {
        return Err(Error::validation(
            "weights",
            format!("{} weights for {} heads", weights.len(), logits.len()),
        ));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&z, &w) in logits.iter().zip(weights) {
        terms.push((g.cross_entropy(z, labels)?, w));
    }
    g.lin_comb(&terms)
}

/// `Σ_k H(ŷᵏ)` with batch-mean entropies, over every head in `logits`.
pub fn entmin_loss(g: &mut Graph, logits: &[Var]) -> Result<Var> {
    let terms: Vec<(Var, f64)> = logits.iter().map(|&z| (g.mean_entropy(z), 1.0)).collect();
    g.lin_comb(&terms)
}

/// One mini-batch: per-modality feature matrices and, for source data, labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Graph handles produced by a forward pass through every head.
pub struct Forward {
    pub embeddings: Vec<Var>,
    /// Joint logits first, then one per modality.
    pub logits: Vec<Var>,
}

pub fn forward_heads(g: &mut Graph, net: &MultimodalNet, inputs: &[Matrix]) -> Result<Forward> {
    let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let embeddings = net.encode_all(g, &xs)?;
    let mut logits = Vec::with_capacity(embeddings.len() + 1);
    logits.push(net.joint_logits(g, &embeddings)?);
    for (k, &e) in embeddings.iter().enumerate() {
        logits.push(net.modality_logits(g, k, e)?);
    }
    Ok(Forward { embeddings, logits })
}

/// Self-supervised and entropy terms on one forward pass.
struct Unsupervised {
    masked_trans: Option<Var>,
    muljig: Option<Var>,
    entmin: Option<Var>,
}

fn unsupervised_terms<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    fwd: &Forward,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    rng: &mut R,
) -> Result<Unsupervised> {
    let t = cfg.toggles;
    let masked_trans = if t.masked_translation {
        Some(masked_translation_loss(g, net, &fwd.embeddings, cfg.mask_ratio, rng)?)
    } else {
        None
    };
    let muljig = if t.jigsaw {
        Some(jigsaw_loss(g, net, &fwd.embeddings, perm_set, rng)?)
    } else {
        None
    };
    let entmin = if t.entropy_min {
        Some(entmin_loss(g, &fwd.logits)?)
    } else {
        None
    };
    Ok(Unsupervised {
        masked_trans,
        muljig,
        entmin,
    })
}

fn value(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item())
}

/// Domain-generalization objective
/// `L_cls + α1·L_MaskedTrans + α2·L_MulJig + α3·L_EntMin` on a labeled batch.
/// Disabled terms are not evaluated.
pub fn total_loss_dg<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    batch: &Batch,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    dg_inner(g, net, batch, cfg, perm_set, rng, None)
}

/// [`total_loss_dg`] with the head weights pinned to `weights` instead of
/// being recomputed from the batch. Finite-difference checks use this so
/// the perturbed objective matches the one being differentiated.
pub fn total_loss_dg_frozen<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    batch: &Batch,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    weights: &[f64],
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    dg_inner(g, net, batch, cfg, perm_set, rng, Some(weights))
}

fn dg_inner<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    batch: &Batch,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    rng: &mut R,
    frozen: Option<&[f64]>,
) -> Result<(Var, LossParts)> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::validation("batch", "source batches must be labeled"))?;
    let fwd = forward_heads(g, net, &batch.inputs)?;
    let (cls, weights) = match frozen {
        Some(w) => (fixed_weight_cls_loss(g, &fwd.logits, labels, w)?, w.to_vec()),
        None => weighted_cls_loss(
            g,
            &fwd.logits,
            labels,
            cfg.temperature,
            cfg.toggles.entropy_weighting,
        )?,
    };
    let un = unsupervised_terms(g, net, &fwd, cfg, perm_set, rng)?;
    let mut terms = vec![(cls, 1.0)];
    for (v, a) in [(un.masked_trans, cfg.alpha1), (un.muljig, cfg.alpha2), (un.entmin, cfg.alpha3)] {
        if let Some(v) = v {
            terms.push((v, a));
        }
    }
    let total = g.lin_comb(&terms)?;
    let parts = LossParts {
        cls: g.value(cls).item(),
        masked_trans: value(g, un.masked_trans),
        muljig: value(g, un.muljig),
        entmin: value(g, un.entmin),
        total: g.value(total).item(),
        weights,
    };
    Ok((total, parts))
}

/// Indices of target rows whose joint-head confidence `max ŷ⁰` reaches `tau`
/// (kept) and of the rest (rejected). Runs without recording gradients.
pub fn filter_known_targets(
    net: &MultimodalNet,
    inputs: &[Matrix],
    tau: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation("tau", format!("{tau} not in [0, 1]")));
    }
    let out = net.infer(inputs)?;
    let log_tau = tau.ln();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in out.joint_logits.iter_rows().enumerate() {
        if log_max_softmax(row) >= log_tau {
            kept.push(i);
        } else {
            rejected.push(i);
        }
    }
    Ok((kept, rejected))
}

/// `ln max softmax(z)`, exact enough that it stays strictly negative for
/// any finite logits with more than one class.
pub fn log_max_softmax(row: &[f64]) -> f64 {
    let (arg, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    -rest.ln_1p()
}

/// Domain-adaptation objective. Target terms (masked translation, jigsaw,
/// entropy minimization) are evaluated on `target`, which must already be
/// the confidence-filtered subset and carries no labels. With no target
/// rows, or during warm-up, this is exactly [`total_loss_dg`].
///
/// Target terms draw their randomness from a copy of `rng` taken before
/// the source terms, so identical source and target batches see identical
/// masks and jigsaw labels.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_da<R: Rng + Clone>(
    g: &mut Graph,
    net: &MultimodalNet,
    source: &Batch,
    target: Option<&Batch>,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    warmup: bool,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    let target = match target {
        Some(t) if !warmup && t.rows() > 0 => t,
        _ => return total_loss_dg(g, net, source, cfg, perm_set, rng),
    };
    if target.labels.is_some() {
        return Err(Error::validation("target batch", "target labels must not reach the objective"));
    }
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::validation("batch", "source batches must be labeled"))?;
    let mut target_rng = rng.clone();

    let fwd_s = forward_heads(g, net, &source.inputs)?;
    let (cls, weights) = weighted_cls_loss(
        g,
        &fwd_s.logits,
        labels,
        cfg.temperature,
        cfg.toggles.entropy_weighting,
    )?;
    let src = unsupervised_terms(g, net, &fwd_s, cfg, perm_set, rng)?;
    let fwd_t = forward_heads(g, net, &target.inputs)?;
    let tgt = unsupervised_terms(g, net, &fwd_t, cfg, perm_set, &mut target_rng)?;

    let mut terms = vec![(cls, 1.0)];
    let pairs = [
        (src.masked_trans, tgt.masked_trans, cfg.alpha1),
        (src.muljig, tgt.muljig, cfg.alpha2),
        (src.entmin, tgt.entmin, cfg.alpha3),
    ];
    for (s, t, a) in pairs {
        for v in [s, t].into_iter().flatten() {
            terms.push((v, a));
        }
    }
    let total = g.lin_comb(&terms)?;
    let parts = LossParts {
        cls: g.value(cls).item(),
        masked_trans: value(g, src.masked_trans) + value(g, tgt.masked_trans),
        muljig: value(g, src.muljig) + value(g, tgt.muljig),
        entmin: value(g, src.entmin) + value(g, tgt.entmin),
        total: g.value(total).item(),
        weights,
    };
    Ok((total, parts))
}

/// Target-only pretext and entropy values on a batch, for inspection.
pub fn target_terms<R: Rng + ?Sized>(
    net: &MultimodalNet,
    target: &Batch,
    cfg: &TrainConfig,
    perm_set: &PermutationSet,
    rng: &mut R,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let fwd = forward_heads(&mut g, net, &target.inputs)?;
    let un = unsupervised_terms(&mut g, net, &fwd, cfg, perm_set, rng)?;
    Ok(LossParts {
        masked_trans: value(&g, un.masked_trans),
        muljig: value(&g, un.muljig),
        entmin: value(&g, un.entmin),
        ..LossParts::default()
    })
}
