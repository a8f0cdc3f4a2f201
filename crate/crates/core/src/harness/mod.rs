//! Training loops, evaluation on the target domain, experiment sweeps,
//! checkpoints and the composite gradient check.

mod checkpoint;
mod experiment;
mod gradcheck;
mod sweeps;
mod train;

pub use checkpoint::Checkpoint;
pub use experiment::{DataSource, ExperimentSpec, ManifestTask, TaskData};
pub use gradcheck::{
    grad_check, grad_check_with, GradCheckConfig, GradCheckReport, GroupError, GRAD_CHECK_STEP,
    GRAD_CHECK_TOLERANCE, MAX_GRAD_CHECK_PARAMS,
};
pub use sweeps::{
    ablation_ladder, disparate_labels, openness_sweep, run_ablation, summarize, write_results_csv,
    AblationRow, LabelSplit, ResultRow, RowSummary,
};
pub use train::{
    build_net, evaluate_target, permutation_set, train_da, train_dg, validation_accuracy,
    write_training_log, EpochRecord, TargetEval, TrainHistory, Trained,
};
