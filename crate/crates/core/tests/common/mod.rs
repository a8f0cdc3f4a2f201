//! Independent reference implementations shared by the integration tests.

use nalgebra::DMatrix;
use openmm::eval::{ScoreMethod, MAHALANOBIS_RIDGE};
use openmm::Matrix;

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Textbook scores written directly from their definitions.
pub fn brute(method: ScoreMethod, z: &[f64], x: &[f64], fit: &(Vec<Vec<f64>>, DMatrix<f64>)) -> f64 {
    let exps: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    match method {
        ScoreMethod::Msp => p.iter().copied().fold(0.0, f64::max),
        ScoreMethod::NegEntropy => p.iter().map(|p| p * p.ln()).sum(),
        ScoreMethod::MaxLogit => z.iter().copied().fold(f64::MIN, f64::max),
        ScoreMethod::Energy => total.ln(),
        ScoreMethod::Mahalanobis => {
            let (means, inv) = fit;
            let xv = DMatrix::from_row_slice(x.len(), 1, x);
            -means
                .iter()
                .map(|m| {
                    let d = &xv - DMatrix::from_row_slice(m.len(), 1, m);
                    (d.transpose() * inv * &d)[(0, 0)]
                })
                .fold(f64::INFINITY, f64::min)
        }
    }
}

pub fn brute_fit(x: &Matrix, labels: &[usize]) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let c = labels.iter().max().unwrap() + 1;
    let d = x.cols();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let rows: Vec<&[f64]> = x.iter_rows().zip(labels).filter(|(_, &y)| y == k).map(|(r, _)| r).collect();
            (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    for (r, &y) in x.iter_rows().zip(labels) {
        let diff = DMatrix::from_fn(d, 1, |i, _| r[i] - means[y][i]);
        cov += &diff * diff.transpose();
    }
    cov /= x.rows() as f64;
    cov += DMatrix::identity(d, d) * MAHALANOBIS_RIDGE;
    (means, cov.try_inverse().unwrap())
}
