use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const HISTOGRAM_BINS: usize = 50;

/// Harmonic mean of OS* and UNK; 0 when both are 0.
pub fn hos(os_star: f64, unk: f64) -> f64 {
    if os_star + unk == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

/// Score distributions of known and unknown samples over shared bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-class accuracy over known classes present in the ground truth, in %.
    pub os_star: f64,
    /// Accuracy on unknown samples in %; `None` when there are none.
    pub unk: Option<f64>,
    /// Harmonic mean of `os_star` and `unk`; `None` when `unk` is.
    pub hos: Option<f64>,
    /// Accuracy per known class in %; `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][pred]`, with index `num_classes` standing for unknown.
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub histogram: Option<Histogram>,
}

fn slot(label: Label, num_classes: usize) -> Result<usize> {
    match label {
        Label::Unknown => Ok(num_classes),
        Label::Known(c) if c < num_classes => Ok(c),
        Label::Known(c) => Err(Error::Index {
            op: "evaluate",
            index: c as i64,
            bound: num_classes,
        }),
    }
}

/// OS*, UNK and HOS of open-set predictions against ground truth.
pub fn evaluate(predicted: &[Label], truth: &[Label], num_classes: usize) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: (predicted.len(), 1),
            rhs: (truth.len(), 1),
        });
    }
    let mut confusion = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[slot(t, num_classes)?][slot(p, num_classes)?] += 1;
    }
    let accuracy = |c: usize| {
        let total: usize = confusion[c].iter().sum();
        (total > 0).then(|| 100.0 * confusion[c][c] as f64 / total as f64)
    };
    let per_class: Vec<Option<f64>> = (0..num_classes).map(accuracy).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let os_star = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let unk = accuracy(num_classes);
    Ok(EvalReport {
        os_star,
        unk,
        hos: unk.map(|u| hos(os_star, u)),
        per_class,
        confusion,
        histogram: None,
    })
}

/// `argmax ŷ⁰` where the score reaches `threshold`, unknown otherwise.
pub fn classify_openset(probs: &Matrix, scores: &[f64], threshold: f64) -> Result<Vec<Label>> {
    if scores.len() != probs.rows() {
        return Err(Error::Shape {
            op: "classify_openset",
            lhs: probs.shape(),
            rhs: (scores.len(), 1),
        });
    }
    Ok(probs
        .iter_rows()
        .zip(scores)
        .map(|(row, &s)| {
            if s >= threshold {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                Label::Known(arg)
            } else {
                Label::Unknown
            }
        })
        .collect())
}

/// Known vs unknown score histogram over `bins` equal-width bins spanning
/// the observed score range.
pub fn score_histogram(scores: &[f64], truth: &[Label], bins: usize) -> Result<Histogram> {
    if scores.len() != truth.len() {
        return Err(Error::Shape {
            op: "score_histogram",
            lhs: (scores.len(), 1),
            rhs: (truth.len(), 1),
        });
    }
    let finite = scores.iter().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut known = vec![0; bins];
    let mut unknown = vec![0; bins];
    for (&s, &t) in scores.iter().zip(truth) {
        if !s.is_finite() {
            continue;
        }
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if t.is_unknown() {
            unknown[b] += 1;
        } else {
            known[b] += 1;
        }
    }
    Ok(Histogram { edges, known, unknown })
}

pub fn write_histogram_csv(hist: &Histogram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_left", "bin_right", "count_known", "count_unknown"])?;
    for i in 0..hist.known.len() {
        w.write_record([
            hist.edges[i].to_string(),
            hist.edges[i + 1].to_string(),
            hist.known[i].to_string(),
            hist.unknown[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub reports: Vec<EvalReport>,
    /// Index of the best-HOS threshold; ties go to the lower threshold.
    pub best: usize,
}

/// Evaluates the open-set decision at every threshold of `grid`.
pub fn threshold_sweep(
    scores: &[f64],
    probs: &Matrix,
    truth: &[Label],
    grid: &[f64],
    num_classes: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::validation("grid", "threshold grid is empty"));
    }
    let reports = grid
        .iter()
        .map(|&t| evaluate(&classify_openset(probs, scores, t)?, truth, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let key = |r: &EvalReport| r.hos.unwrap_or(f64::NEG_INFINITY);
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (key(&reports[i]), key(&reports[best]));
        if a > b || (a == b && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(SweepResult {
        thresholds: grid.to_vec(),
        reports,
        best,
    })
}
