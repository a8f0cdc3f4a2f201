//! Open-set evaluation: confidence scores, the unknown-class decision, and
//! the OS*/UNK/HOS metrics.

mod metrics;
mod scores;

pub use metrics::{
    classify_openset, evaluate, hos, score_histogram, threshold_sweep, write_histogram_csv,
    EvalReport, Histogram, SweepResult, HISTOGRAM_BINS,
};
pub use scores::{fit_mahalanobis, score, MahalanobisState, ScoreMethod, MAHALANOBIS_RIDGE};
