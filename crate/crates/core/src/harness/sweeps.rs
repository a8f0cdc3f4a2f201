use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{DataSource, ExperimentSpec, TaskData};
use super::train::{evaluate_target, train_dg};
use crate::data::{Label, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::ScoreMethod;
use crate::objective::Toggles;

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub seed: u64,
    pub method_variant: String,
    pub os_star: f64,
    pub unk: Option<f64>,
    pub hos: Option<f64>,
    pub threshold: f64,
    pub score_method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
}

impl AblationRow {
    pub fn new(name: &str, jigsaw: bool, masked_translation: bool, entropy_weighting: bool, entropy_min: bool) -> Self {
        Self {
            name: name.into(),
            toggles: Toggles {
                jigsaw,
                masked_translation,
                entropy_weighting,
                entropy_min,
            },
        }
    }
}

/// The six-row module ladder: none, +MulJig, +MaskedTrans, both, +EntWei, +EntMin.
pub fn ablation_ladder() -> Vec<AblationRow> {
    vec![
        AblationRow::new("none", false, false, false, false),
        AblationRow::new("muljig", true, false, false, false),
        AblationRow::new("maskedtrans", false, true, false, false),
        AblationRow::new("muljig+maskedtrans", true, true, false, false),
        AblationRow::new("muljig+maskedtrans+entwei", true, true, true, false),
        AblationRow::new("full", true, true, true, true),
    ]
}

struct Cell<'a> {
    variant: String,
    toggles: Toggles,
    seed: u64,
    task: &'a TaskData,
}

fn run_cells(spec: &ExperimentSpec, cells: Vec<Cell<'_>>) -> Result<Vec<ResultRow>> {
    let threshold = spec.train.eval_threshold;
    cells
        .into_par_iter()
        .map(|cell| {
            let cfg = crate::objective::TrainConfig {
                toggles: cell.toggles,
                ..spec.train_config(cell.seed)
            };
            let trained = train_dg(&cfg, &cell.task.sources)?;
            let eval = evaluate_target(&trained.net, &cell.task.target, ScoreMethod::Msp, threshold, None)?;
            Ok(ResultRow {
                task: cell.task.name.clone(),
                seed: cell.seed,
                method_variant: cell.variant,
                os_star: eval.report.os_star,
                unk: eval.report.unk,
                hos: eval.report.hos,
                threshold,
                score_method: ScoreMethod::Msp.name().into(),
            })
        })
        .collect()
}

fn tasks_by_seed(spec: &ExperimentSpec) -> Result<Vec<(u64, Vec<TaskData>)>> {
    spec.seeds.iter().map(|&s| Ok((s, spec.tasks(s)?))).collect()
}

/// Trains and evaluates every (row, task, seed) cell. Output is ordered by
/// row, then task, then seed.
pub fn run_ablation(spec: &ExperimentSpec, rows: &[AblationRow]) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(Error::validation("toggle matrix", "at least one row is required"));
    }
    let data = tasks_by_seed(spec)?;
    let n_tasks = data.first().map_or(0, |(_, t)| t.len());
    let mut cells = Vec::new();
    for row in rows {
        for t in 0..n_tasks {
            for (seed, tasks) in &data {
                cells.push(Cell {
                    variant: row.name.clone(),
                    toggles: row.toggles,
                    seed: *seed,
                    task: &tasks[t],
                });
            }
        }
    }
    run_cells(spec, cells)
}

/// Trains at each `(known, unknown)` split of the synthetic class set.
/// The first `unknown` generator classes become the open classes.
pub fn openness_sweep(spec: &ExperimentSpec, ratios: &[(usize, usize)]) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let DataSource::Synthetic(base) = &spec.data else {
        return Err(Error::Config("openness sweeps need synthetic data".into()));
    };
    let total = base.total_classes();
    let mut owned = Vec::new();
    for &(known, unknown) in ratios {
        if known + unknown != total || known < 2 {
            return Err(Error::validation(
                "ratio",
                format!("{known}:{unknown} is infeasible for {total} classes"),
            ));
        }
        let variant_spec = ExperimentSpec {
            data: DataSource::Synthetic(SyntheticConfig {
                n_known: known,
                n_unknown: unknown,
                ..base.clone()
            }),
            ..spec.clone()
        };
        owned.push((format!("{known}:{unknown}"), tasks_by_seed(&variant_spec)?));
    }
    let mut cells = Vec::new();
    for (name, data) in &owned {
        for (seed, tasks) in data {
            for task in tasks {
                cells.push(Cell {
                    variant: name.clone(),
                    toggles: spec.train.toggles,
                    seed: *seed,
                    task,
                });
            }
        }
    }
    run_cells(spec, cells)
}

/// Per-source class subsets and the target's known/unknown classes, all
/// in generator class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub sources: Vec<Vec<usize>>,
    pub target_known: Vec<usize>,
    pub target_unknown: Vec<usize>,
}

impl LabelSplit {
    /// Source-1 {1,3,4,5,6}, Source-2 {2,4,5,6,7}, target {0,1,2,5,6}
    /// with class 0 open.
    pub fn reference() -> Self {
        Self {
            sources: vec![vec![1, 3, 4, 5, 6], vec![2, 4, 5, 6, 7]],
            target_known: vec![1, 2, 5, 6],
            target_unknown: vec![0],
        }
    }

    /// Known label space: the sorted union of the source subsets.
    pub fn known_classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.sources.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    pub fn validate(&self, total_classes: usize, n_sources: usize) -> Result<()> {
        if self.sources.len() != n_sources {
            return Err(Error::validation(
                "sources",
                format!("{} subsets for {n_sources} source domains", self.sources.len()),
            ));
        }
        let known = self.known_classes();
        for &c in self.sources.iter().flatten().chain(&self.target_known).chain(&self.target_unknown) {
            if c >= total_classes {
                return Err(Error::validation("class", format!("{c} ≥ {total_classes} generator classes")));
            }
        }
        for &c in &self.target_known {
            if !known.contains(&c) {
                return Err(Error::validation(
                    "target_known",
                    format!("class {c} appears in no source domain"),
                ));
            }
        }
        for &c in &self.target_unknown {
            if known.contains(&c) {
                return Err(Error::validation(
                    "target_unknown",
                    format!("class {c} is known to a source domain"),
                ));
            }
        }
        Ok(())
    }

    /// Restricts a task generated with every class labeled known (generator
    /// class `c` ↦ `Known(c)`) to this split.
    pub fn apply(&self, task: &TaskData) -> Result<TaskData> {
        let known = self.known_classes();
        let names: Vec<String> = known.iter().map(|c| format!("class_{c}")).collect();
        let index_of = |c: usize| known.iter().position(|&k| k == c);
        let sources = task
            .sources
            .iter()
            .zip(&self.sources)
            .map(|(ds, subset)| {
                ds.relabel(names.clone(), |l| match l {
                    Label::Known(c) if subset.contains(&c) => index_of(c).map(Label::Known),
                    _ => None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target = task.target.relabel(names, |l| match l {
            Label::Known(c) if self.target_known.contains(&c) => index_of(c).map(Label::Known),
            Label::Known(c) if self.target_unknown.contains(&c) => Some(Label::Unknown),
            _ => None,
        })?;
        Ok(TaskData {
            name: task.name.clone(),
            sources,
            target,
        })
    }
}

/// Trains with per-source label subsets and evaluates on the target's
/// restricted label space.
pub fn disparate_labels(spec: &ExperimentSpec, split: &LabelSplit) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let DataSource::Synthetic(base) = &spec.data else {
        return Err(Error::Config("disparate label sets need synthetic data".into()));
    };
    split.validate(base.total_classes(), base.n_sources)?;
    let all_known = ExperimentSpec {
        data: DataSource::Synthetic(SyntheticConfig {
            n_known: base.total_classes(),
            n_unknown: 0,
            ..base.clone()
        }),
        ..spec.clone()
    };
    let mut owned = Vec::new();
    for &seed in &spec.seeds {
        let tasks = all_known
            .tasks(seed)?
            .iter()
            .map(|t| split.apply(t))
            .collect::<Result<Vec<_>>>()?;
        owned.push((seed, tasks));
    }
    let cells = owned
        .iter()
        .flat_map(|(seed, tasks)| {
            tasks.iter().map(|task| Cell {
                variant: "disparate".into(),
                toggles: spec.train.toggles,
                seed: *seed,
                task,
            })
        })
        .collect();
    run_cells(spec, cells)
}

/// Mean and median HOS per variant, in first-appearance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub method_variant: String,
    pub mean_hos: Option<f64>,
    pub median_hos: Option<f64>,
    pub runs: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn summarize(rows: &[ResultRow]) -> Vec<RowSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.method_variant.as_str()) {
            order.push(&r.method_variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.method_variant == variant).collect();
            let hos: Vec<f64> = group.iter().filter_map(|r| r.hos).collect();
            RowSummary {
                method_variant: variant.into(),
                mean_hos: (!hos.is_empty()).then(|| hos.iter().sum::<f64>() / hos.len() as f64),
                median_hos: median(hos),
                runs: group.len(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "task",
        "seed",
        "method_variant",
        "os_star",
        "unk",
        "hos",
        "threshold",
        "score_method",
    ])?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.seed.to_string(),
            r.method_variant.clone(),
            r.os_star.to_string(),
            opt(r.unk),
            opt(r.hos),
            r.threshold.to_string(),
            r.score_method.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
