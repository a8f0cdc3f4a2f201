//! Self-supervised pretext tasks on modality embeddings: masked cross-modal
//! translation and multimodal jigsaw puzzles.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::net::MultimodalNet;
use crate::tensor::Matrix;

/// Number of entries zeroed per row: `floor(β·e)`.
///
/// A 1e-9 slack absorbs products like `0.7 × 30 = 20.999…`.
pub fn mask_count(beta: f64, width: usize) -> usize {
    ((beta * width as f64 + 1e-9).floor() as usize).min(width)
}

fn check_ratio(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation("mask_ratio", format!("{beta} not in [0, 1]")));
    }
    Ok(())
}

/// A 0/1 matrix with exactly `floor(β·cols)` zeros per row, positions drawn
/// uniformly without replacement independently for every row.
pub fn mask_pattern<R: Rng + ?Sized>(rows: usize, cols: usize, beta: f64, rng: &mut R) -> Result<Matrix> {
    check_ratio(beta)?;
    let k = mask_count(beta, cols);
    let mut out = Matrix::filled(rows, cols, 1.0);
    for r in 0..rows {
        let row = out.row_mut(r);
        for j in index::sample(rng, cols, k) {
            row[j] = 0.0;
        }
    }
    Ok(out)
}

/// Zeroes `floor(β·e)` random entries of every row of `embedding`.
pub fn mask<R: Rng + ?Sized>(embedding: &Matrix, beta: f64, rng: &mut R) -> Result<Matrix> {
    let pattern = mask_pattern(embedding.rows(), embedding.cols(), beta, rng)?;
    let mut out = embedding.clone();
    for (v, m) in out.as_mut_slice().iter_mut().zip(pattern.as_slice()) {
        if *m == 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

fn check_pairs(embeddings: &[Var]) -> Result<usize> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::Config("translation requires ≥ 2 modalities".into()));
    }
    Ok(m)
}

/// Mean over ordered pairs `i ≠ j` of `‖MLP_{i→j}(Eⁱ) − Eʲ‖²`, batch-meaned.
pub fn translation_loss(g: &mut Graph, net: &MultimodalNet, embeddings: &[Var]) -> Result<Var> {
    let m = check_pairs(embeddings)?;
    let mut terms = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let translated = net.translate(g, i, j, embeddings[i])?;
                terms.push(g.l2_sq(translated, embeddings[j])?);
            }
        }
    }
    let norm = 1.0 / (m * (m - 1)) as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, norm)).collect();
    g.lin_comb(&weighted)
}

/// Translation loss where each source embedding is masked with ratio `beta`
/// before it is translated. A fresh mask is drawn for every ordered pair.
/// With `beta = 0` no mask is applied and the result equals
/// [`translation_loss`] exactly.
pub fn masked_translation_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    embeddings: &[Var],
    beta: f64,
    rng: &mut R,
) -> Result<Var> {
    check_ratio(beta)?;
    let m = check_pairs(embeddings)?;
    let mut terms = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let (rows, cols) = g.shape(embeddings[i]);
            let source = if mask_count(beta, cols) == 0 {
                embeddings[i]
            } else {
                let pattern = mask_pattern(rows, cols, beta, rng)?;
                g.mul_const(embeddings[i], pattern)?
            };
            let translated = net.translate(g, i, j, source)?;
            terms.push(g.l2_sq(translated, embeddings[j])?);
        }
    }
    let norm = 1.0 / (m * (m - 1)) as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, norm)).collect();
    g.lin_comb(&weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JigsawConfig {
    /// Parts per modality embedding.
    pub parts: usize,
    /// Number of permutation classes.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for JigsawConfig {
    fn default() -> Self {
        Self {
            parts: 4,
            permutations: 128,
            seed: 0,
        }
    }
}

/// `n!`, or `None` once it exceeds `u128`.
pub fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

/// `Q` distinct permutations of the `M·P` embedding chunks. The position of
/// a permutation in the set is its class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    pub modalities: usize,
    pub parts: usize,
    perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn from_perms(modalities: usize, parts: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        let n = modalities * parts;
        let mut seen = HashSet::new();
        for (p, perm) in perms.iter().enumerate() {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::validation(
                    format!("permutations[{p}]"),
                    format!("not a bijection on 0..{n}"),
                ));
            }
            if !seen.insert(perm.clone()) {
                return Err(Error::validation(format!("permutations[{p}]"), "duplicate permutation"));
            }
        }
        if perms.is_empty() {
            return Err(Error::validation("permutations", "at least one is required"));
        }
        Ok(Self {
            modalities,
            parts,
            perms,
        })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, label: usize) -> &[usize] {
        &self.perms[label]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.perms.iter().map(Vec::as_slice)
    }
}

/// Samples `q` distinct chunk permutations uniformly by rejection.
pub fn build_permutation_set<R: Rng + ?Sized>(
    modalities: usize,
    parts: usize,
    q: usize,
    rng: &mut R,
) -> Result<PermutationSet> {
    if parts < 1 {
        return Err(Error::validation("parts", "must be ≥ 1"));
    }
    if q < 1 {
        return Err(Error::validation("permutations", "must be ≥ 1"));
    }
    let n = modalities * parts;
    if let Some(pool) = factorial(n) {
        if q as u128 > pool {
            return Err(Error::Config(format!(
                "permutation pool exhausted: requested {q} permutations but ({modalities}·{parts})! = {pool}"
            )));
        }
    }
    let mut seen = HashSet::with_capacity(q);
    let mut perms = Vec::with_capacity(q);
    let mut candidate: Vec<usize> = (0..n).collect();
    while perms.len() < q {
        candidate.shuffle(rng);
        if seen.insert(candidate.clone()) {
            perms.push(candidate.clone());
        }
    }
    Ok(PermutationSet {
        modalities,
        parts,
        perms,
    })
}

/// Column indices into `[E⁰ ‖ … ‖ E^{M-1}]` that realize `perm`.
///
/// Chunk `k·P + p` is the `p`-th of `P` equal contiguous slices of `Eᵏ`.
pub fn column_order(embed_dims: &[usize], parts: usize, perm: &[usize]) -> Result<Vec<usize>> {
    if perm.len() != embed_dims.len() * parts {
        return Err(Error::validation(
            "permutation",
            format!("length {} but there are {} chunks", perm.len(), embed_dims.len() * parts),
        ));
    }
    let mut chunks = Vec::with_capacity(perm.len());
    let mut offset = 0;
    for (k, &e) in embed_dims.iter().enumerate() {
        if parts == 0 || e % parts != 0 {
            return Err(Error::validation(
                format!("modality {k}"),
                format!("embedding width {e} not divisible by {parts} parts"),
            ));
        }
        let w = e / parts;
        for p in 0..parts {
            chunks.push(offset + p * w..offset + (p + 1) * w);
        }
        offset += e;
    }
    let mut order = Vec::with_capacity(offset);
    for &c in perm {
        let range = chunks.get(c).ok_or(Error::Index {
            op: "column_order",
            index: c as i64,
            bound: chunks.len(),
        })?;
        order.extend(range.clone());
    }
    Ok(order)
}

/// Inverse of a column order: `inverse[order[j]] = j`.
pub fn invert_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (j, &c) in order.iter().enumerate() {
        inv[c] = j;
    }
    inv
}

/// Reorders the chunks of the concatenated embeddings by `perm`.
pub fn recompose(embeddings: &[Matrix], parts: usize, perm: &[usize]) -> Result<Matrix> {
    let dims: Vec<usize> = embeddings.iter().map(Matrix::cols).collect();
    let order = column_order(&dims, parts, perm)?;
    let refs: Vec<&Matrix> = embeddings.iter().collect();
    Ok(Matrix::hcat(&refs)?.gather_cols(&order))
}

/// Jigsaw classification loss: every sample draws a label `p` uniformly,
/// is recomposed with permutation `p`, and `h_p` must recover `p`.
pub fn jigsaw_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &MultimodalNet,
    embeddings: &[Var],
    perm_set: &PermutationSet,
    rng: &mut R,
) -> Result<Var> {
    let q = perm_set.len();
    let head_width = net.jigsaw_head().output_dim();
    if head_width != q {
        return Err(Error::validation(
            "jigsaw_head",
            format!("outputs {head_width} classes but the permutation set has {q}"),
        ));
    }
    let dims: Vec<usize> = embeddings.iter().map(|&e| g.shape(e).1).collect();
    let rows = g.shape(embeddings[0]).0;
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..q)).collect();
    let orders = perm_set
        .iter()
        .map(|perm| column_order(&dims, perm_set.parts, perm))
        .collect::<Result<Vec<_>>>()?;
    let joint = g.hcat(embeddings)?;
    let per_row: Vec<Vec<usize>> = labels.iter().map(|&p| orders[p].clone()).collect();
    let recomposed = g.gather_cols_per_row(joint, per_row)?;
    let logits = net.jigsaw_logits(g, recomposed)?;
    g.cross_entropy(logits, &labels)
}
