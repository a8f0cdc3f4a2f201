//! A small reverse-mode differentiation engine over dense matrices.
//!
//! A [`Graph`] records every operation in evaluation order. Each recorded
//! node owns its forward value; [`Graph::backward`] walks the record in
//! reverse once and accumulates gradients into the parameters that were
//! read through [`Graph::param`]. A graph lives for a single forward and
//! backward pass and is dropped afterwards.

mod adam;
mod mlp;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, Mlp};
pub use params::{Gradients, Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    HCat(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    GatherColsPerRow(Var, Vec<Vec<usize>>),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Softmax(Var),
    /// Cached softmax probabilities alongside the labels.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    MeanEntropy {
        logits: Var,
        probs: Matrix,
        entropies: Vec<f64>,
    },
    L2Sq(Var, Var),
    SumSquares(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable per-row softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Per-row log-softmax, `z - max - ln Σ exp(z - max)`.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = logsumexp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Natural-log entropy of each row of softmax(logits), computed from logits.
fn row_entropies(logits: &Matrix, probs: &Matrix) -> Vec<f64> {
    let log_p = log_softmax_rows(logits);
    (0..logits.rows())
        .map(|r| {
            -probs
                .row(r)
                .iter()
                .zip(log_p.row(r))
                .map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 })
                .sum::<f64>()
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. Receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Reads a parameter; gradients flow back to it on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Adds a `1 × n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    /// Which inputs of every recorded ReLU are strictly positive, in
    /// recording order. Two passes with equal patterns lie on the same
    /// smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).as_slice().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::HCat(parts.to_vec()), needs))
    }

    /// Output column `j` is input column `index[j]`.
    pub fn gather_cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let cols = self.shape(x).1;
        if let Some(&bad) = index.iter().find(|&&j| j >= cols) {
            return Err(Error::Index {
                op: "gather_cols",
                index: bad as i64,
                bound: cols,
            });
        }
        let value = self.value(x).gather_cols(index);
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherCols(x, index.to_vec()), needs))
    }

    /// Row-wise column gather: output `(r, j)` is input `(r, index[r][j])`.
    pub fn gather_cols_per_row(&mut self, x: Var, index: Vec<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if index.len() != rows {
            return Err(Error::Shape {
                op: "gather_cols_per_row",
                lhs: (rows, cols),
                rhs: (index.len(), 0),
            });
        }
        let width = index.first().map_or(0, Vec::len);
        let mut value = Matrix::zeros(rows, width);
        for (r, idx) in index.iter().enumerate() {
            if idx.len() != width {
                return Err(Error::Shape {
                    op: "gather_cols_per_row",
                    lhs: (rows, width),
                    rhs: (1, idx.len()),
                });
            }
            let src = self.value(x).row(r);
            for (j, &c) in idx.iter().enumerate() {
                if c >= cols {
                    return Err(Error::Index {
                        op: "gather_cols_per_row",
                        index: c as i64,
                        bound: cols,
                    });
                }
                value[(r, j)] = src[c];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherColsPerRow(x, index), needs))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, factor: Matrix) -> Result<Var> {
        if self.shape(x) != factor.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x),
                rhs: factor.shape(),
            });
        }
        let mut value = self.value(x).clone();
        for (v, f) in value.as_mut_slice().iter_mut().zip(factor.as_slice()) {
            *v *= f;
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulConst(x, factor), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn softmax(&mut self, logits: Var) -> Var {
        let value = softmax_rows(self.value(logits));
        let needs = self.needs(logits);
        self.push(value, Op::Softmax(logits), needs)
    }

    /// Batch-mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: z.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad as i64,
                bound: z.cols(),
            });
        }
        let n = z.rows().max(1) as f64;
        let log_p = log_softmax_rows(z);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &y)| log_p[(r, y)])
            .sum::<f64>()
            / n;
        let probs = log_p.map(f64::exp);
        let needs = self.needs(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Batch-mean entropy of softmax(logits), as a differentiable scalar.
    pub fn mean_entropy(&mut self, logits: Var) -> Var {
        let z = self.value(logits);
        let probs = softmax_rows(z);
        let entropies = row_entropies(z, &probs);
        let n = z.rows().max(1) as f64;
        let mean = entropies.iter().sum::<f64>() / n;
        let needs = self.needs(logits);
        self.push(
            Matrix::scalar(mean),
            Op::MeanEntropy {
                logits,
                probs,
                entropies,
            },
            needs,
        )
    }

    /// Mean over rows of the squared Euclidean distance between `a` and `b`.
    pub fn l2_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "l2_sq",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let n = va.rows().max(1) as f64;
        let total: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Matrix::scalar(total / n), Op::L2Sq(a, b), needs))
    }

    /// Σ x² over all entries.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).frobenius_sq());
        let needs = self.needs(x);
        self.push(value, Op::SumSquares(x), needs)
    }

    /// Σ cᵢ·xᵢ over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(Matrix::scalar(0.0)));
        };
        let shape = self.shape(first);
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            if self.shape(v) != shape {
                return Err(Error::Shape {
                    op: "lin_comb",
                    lhs: shape,
                    rhs: self.shape(v),
                });
            }
            value.add_scaled(self.value(v), c);
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(value, Op::LinComb(terms.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    /// Reverse pass from a scalar `loss`. Parameters the loss does not reach
    /// receive zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads = Gradients::zeros(store);
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Matrix, adj: &mut Vec<Option<Matrix>>| {
                if !self.needs(v) {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.matmul_t(self.value(*b))?, &mut adj);
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t_matmul(&g)?, &mut adj);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for row in g.iter_rows() {
                            for (d, v) in db.as_mut_slice().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        send(*b, db, &mut adj);
                    }
                    send(*x, g, &mut adj);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &out) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if out <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    send(*x, d, &mut adj);
                }
                Op::HCat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        if self.needs(p) {
                            let index: Vec<usize> = (offset..offset + width).collect();
                            send(p, g.gather_cols(&index), &mut adj);
                        }
                        offset += width;
                    }
                }
                Op::GatherCols(x, index) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let src = g.row(r);
                        let dst = d.row_mut(r);
                        for (j, &c) in index.iter().enumerate() {
                            dst[c] += src[j];
                        }
                    }
                    send(*x, d, &mut adj);
                }
                Op::GatherColsPerRow(x, index) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    for (r, idx) in index.iter().enumerate() {
                        let src = g.row(r);
                        let dst = d.row_mut(r);
                        for (j, &c) in idx.iter().enumerate() {
                            dst[c] += src[j];
                        }
                    }
                    send(*x, d, &mut adj);
                }
                Op::MulConst(x, factor) => {
                    let mut d = g;
                    for (dv, f) in d.as_mut_slice().iter_mut().zip(factor.as_slice()) {
                        *dv *= f;
                    }
                    send(*x, d, &mut adj);
                }
                Op::Scale(x, c) => send(*x, g.map(|v| v * c), &mut adj),
                Op::Softmax(x) => {
                    // dz = p ⊙ (g − ⟨g, p⟩) per row
                    let p = &node.value;
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                        for ((dv, &gv), &pv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r))
                        {
                            *dv = pv * (gv - dot);
                        }
                    }
                    send(*x, d, &mut adj);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / probs.rows().max(1) as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d[(r, y)] -= 1.0;
                    }
                    send(*logits, d.map(|v| v * scale), &mut adj);
                }
                Op::MeanEntropy {
                    logits,
                    probs,
                    entropies,
                } => {
                    // ∂H/∂z_j = −p_j (log p_j + H)
                    let scale = g.item() / probs.rows().max(1) as f64;
                    let log_p = log_softmax_rows(self.value(*logits));
                    let mut d = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, &h) in entropies.iter().enumerate() {
                        for ((dv, &p), &lp) in
                            d.row_mut(r).iter_mut().zip(probs.row(r)).zip(log_p.row(r))
                        {
                            *dv = -scale * p * (lp + h);
                        }
                    }
                    send(*logits, d, &mut adj);
                }
                Op::L2Sq(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let scale = 2.0 * g.item() / va.rows().max(1) as f64;
                    let mut diff = va.clone();
                    diff.add_scaled(vb, -1.0);
                    let da = diff.map(|v| v * scale);
                    if self.needs(*b) {
                        send(*b, da.map(|v| -v), &mut adj);
                    }
                    send(*a, da, &mut adj);
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g.item();
                    send(*x, self.value(*x).map(|v| v * s), &mut adj);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        send(v, g.map(|x| x * c), &mut adj);
                    }
                }
            }
        }
        Ok(grads)
    }
}
