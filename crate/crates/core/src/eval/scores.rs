use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, softmax_rows};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Ridge added to the pooled covariance before inversion.
pub const MAHALANOBIS_RIDGE: f64 = 1e-3;

/// Confidence scores. Every method is oriented so that a higher score
/// means "more likely a known class".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Msp,
    NegEntropy,
    MaxLogit,
    Energy,
    Mahalanobis,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 5] = [
        ScoreMethod::Msp,
        ScoreMethod::NegEntropy,
        ScoreMethod::MaxLogit,
        ScoreMethod::Energy,
        ScoreMethod::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::NegEntropy => "neg_entropy",
            ScoreMethod::MaxLogit => "max_logit",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Mahalanobis => "mahalanobis",
        }
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation("score_method", format!("unknown method `{s}`")))
    }
}

/// Class means and the shared inverse covariance of a Gaussian
/// class-conditional model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisState {
    pub means: Vec<Vec<f64>>,
    pub covariance: Matrix,
    pub precision: Matrix,
}

impl MahalanobisState {
    /// Squared Mahalanobis distance of `x` to each class mean.
    pub fn distances(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut diff = vec![0.0; d];
        self.means
            .iter()
            .map(|mu| {
                for i in 0..d {
                    diff[i] = x[i] - mu[i];
                }
                let mut total = 0.0;
                for i in 0..d {
                    let row = self.precision.row(i);
                    let dot: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
                    total += diff[i] * dot;
                }
                total
            })
            .collect()
    }
}

/// Fits class means and a pooled covariance `(1/N) Σ (x−μ_y)(x−μ_y)ᵀ + λI`.
pub fn fit_mahalanobis(features: &Matrix, labels: &[usize]) -> Result<MahalanobisState> {
    if labels.len() != features.rows() {
        return Err(Error::Shape {
            op: "fit_mahalanobis",
            lhs: features.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.cols();
    let mut counts = vec![0usize; classes];
    let mut means = vec![vec![0.0; d]; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n < 2 {
            return Err(Error::validation(
                "labels",
                format!("class {c} has {n} sample(s); Mahalanobis needs at least 2"),
            ));
        }
        for m in means[c].iter_mut() {
            *m /= n as f64;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for (row, &y) in features.iter_rows().zip(labels) {
        let diff: Vec<f64> = row.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    let n = features.rows() as f64;
    for v in cov.as_mut_slice() {
        *v /= n;
    }
    for i in 0..d {
        cov[(i, i)] += MAHALANOBIS_RIDGE;
    }
    let dm = DMatrix::from_row_slice(d, d, cov.as_slice());
    let chol = dm
        .cholesky()
        .ok_or_else(|| Error::Numeric("pooled covariance is not positive definite".into()))?;
    let inv = chol.inverse();
    let mut precision = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            precision[(i, j)] = inv[(i, j)];
        }
    }
    if !precision.is_finite() {
        return Err(Error::Numeric("non-finite precision matrix".into()));
    }
    Ok(MahalanobisState {
        means,
        covariance: cov,
        precision,
    })
}

/// Per-sample confidence of the joint head.
///
/// `logits` are the joint pre-softmax outputs; `features` the concatenated
/// embeddings (used by Mahalanobis only).
pub fn score(
    method: ScoreMethod,
    logits: &Matrix,
    features: Option<&Matrix>,
    state: Option<&MahalanobisState>,
) -> Result<Vec<f64>> {
    Ok(match method {
        ScoreMethod::Msp => softmax_rows(logits)
            .iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        ScoreMethod::NegEntropy => {
            let p = softmax_rows(logits);
            logits
                .iter_rows()
                .zip(p.iter_rows())
                .map(|(z, p)| {
                    let lse = logsumexp(z);
                    p.iter()
                        .zip(z)
                        .map(|(p, z)| if *p > 0.0 { p * (z - lse) } else { 0.0 })
                        .sum()
                })
                .collect()
        }
        ScoreMethod::MaxLogit => logits
            .iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        ScoreMethod::Energy => logits.iter_rows().map(logsumexp).collect(),
        ScoreMethod::Mahalanobis => {
            let state = state.ok_or_else(|| Error::State("Mahalanobis score used before fitting".into()))?;
            let x = features.ok_or_else(|| Error::State("Mahalanobis score needs embeddings".into()))?;
            if x.rows() != logits.rows() {
                return Err(Error::Shape {
                    op: "score",
                    lhs: logits.shape(),
                    rhs: x.shape(),
                });
            }
            if state.means.first().is_some_and(|m| m.len() != x.cols()) {
                return Err(Error::Shape {
                    op: "score",
                    lhs: x.shape(),
                    rhs: state.precision.shape(),
                });
            }
            x.iter_rows()
                .map(|r| -state.distances(r).into_iter().fold(f64::INFINITY, f64::min))
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_reference_scores() {
        let uniform = Matrix::zeros(1, 4);
        let s = score(ScoreMethod::Msp, &uniform, None, None).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15);
        let two = Matrix::zeros(1, 2);
        let e = score(ScoreMethod::Energy, &two, None, None).unwrap();
        assert!((e[0] - 2f64.ln()).abs() < 1e-15);
        let ne = score(ScoreMethod::NegEntropy, &two, None, None).unwrap();
        assert!((ne[0] + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unfitted_mahalanobis_is_a_state_error() {
        let z = Matrix::zeros(1, 2);
        assert!(matches!(
            score(ScoreMethod::Mahalanobis, &z, Some(&z), None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn separated_clouds_score_their_own_mean() {
        let pts = Matrix::from_rows(&[
            [0.0, 0.1],
            [0.1, 0.0],
            [-0.1, 0.0],
            [10.0, 10.1],
            [10.1, 10.0],
            [9.9, 10.0],
        ])
        .unwrap();
        let labels = [0, 0, 0, 1, 1, 1];
        let st = fit_mahalanobis(&pts, &labels).unwrap();
        for (row, &y) in pts.iter_rows().zip(&labels) {
            let d = st.distances(row);
            let nearest = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(nearest, y);
        }
    }

    #[test]
    fn identical_samples_still_give_finite_scores() {
        let pts = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [2.0, 2.0], [2.0, 2.0]]).unwrap();
        let st = fit_mahalanobis(&pts, &[0, 0, 1, 1]).unwrap();
        let s = score(ScoreMethod::Mahalanobis, &Matrix::zeros(4, 2), Some(&pts), Some(&st)).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(fit_mahalanobis(&pts, &[0, 1, 1, 1]).is_err());
    }
}
