use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{generate_benchmark, read_manifest, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::objective::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// One generated task per seed: sources `0..S` → target `S`.
    Synthetic(SyntheticConfig),
    /// Pre-extracted embeddings, one manifest per domain.
    Manifests(Vec<ManifestTask>),
}

/// Everything needed to run an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Sources and target of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub sources: Vec<Dataset>,
    pub target: Dataset,
}

impl ExperimentSpec {
    pub fn synthetic(train: TrainConfig, data: SyntheticConfig, seeds: Vec<u64>) -> Self {
        Self {
            train,
            data: DataSource::Synthetic(data),
            seeds,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("seeds", "seeds must be distinct"));
        }
        match &self.data {
            DataSource::Synthetic(cfg) => {
                cfg.validate()?;
                for (k, &d) in cfg.modality_dims.iter().enumerate() {
                    if d == 0 {
                        return Err(Error::validation(format!("modality_dims[{k}]"), "must be positive"));
                    }
                }
            }
            DataSource::Manifests(tasks) => {
                if tasks.is_empty() {
                    return Err(Error::validation("data", "at least one task is required"));
                }
                for t in tasks {
                    if t.sources.is_empty() {
                        return Err(Error::validation(
                            format!("task {}", t.name),
                            "at least one source domain is required",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Training config for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Materializes the tasks for one seed. Synthetic data is regenerated
    /// with `data.seed + seed`; manifest data is seed-independent.
    pub fn tasks(&self, seed: u64) -> Result<Vec<TaskData>> {
        match &self.data {
            DataSource::Synthetic(cfg) => {
                let cfg = SyntheticConfig {
                    seed: cfg.seed.wrapping_add(seed),
                    ..cfg.clone()
                };
                let bench = generate_benchmark(&cfg)?;
                let name = format!(
                    "{}->{}",
                    (0..cfg.n_sources).map(|d| format!("S{d}")).collect::<Vec<_>>().join("+"),
                    "T"
                );
                Ok(vec![TaskData {
                    name,
                    sources: bench.sources,
                    target: bench.target,
                }])
            }
            DataSource::Manifests(tasks) => tasks
                .iter()
                .map(|t| {
                    Ok(TaskData {
                        name: t.name.clone(),
                        sources: t.sources.iter().map(|p| read_manifest(p)).collect::<Result<_>>()?,
                        target: read_manifest(&t.target)?,
                    })
                })
                .collect(),
        }
    }
}
