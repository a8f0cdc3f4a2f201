use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openmm::data::{read_manifest, write_manifest, Dataset, SyntheticConfig};
use openmm::eval::{write_histogram_csv, EvalReport, ScoreMethod};
use openmm::harness::{
    ablation_ladder, evaluate_target, grad_check, openness_sweep, run_ablation, summarize,
    train_da, train_dg, write_results_csv, write_training_log, AblationRow, Checkpoint, DataSource,
    ExperimentSpec, GradCheckConfig, ResultRow, TaskData, Trained, GRAD_CHECK_TOLERANCE,
};
use openmm::objective::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "openmm", version, about = "Multimodal open-set domain generalization on feature embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with `train`, `data` and `seeds` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and write one manifest per domain.
    GenData(Common),
    /// Train on the sources with the domain-generalization objective.
    TrainDg(Common),
    /// Train with access to unlabeled target features.
    TrainDa(Common),
    /// Evaluate a checkpoint on a target manifest.
    Eval(EvalArgs),
    /// Train and evaluate every row of the module ablation ladder.
    SweepAblation(Common),
    /// Train and evaluate at several known:unknown class splits.
    SweepOpenness {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `known:unknown` pairs, e.g. `7:1,6:2`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<String>>,
    },
    /// Finite-difference check of the full objective's gradients.
    GradCheck {
        /// JSON micro-config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target manifest (file or directory).
    #[arg(long)]
    target: PathBuf,
    /// Labeled manifests used to fit the Mahalanobis score.
    #[arg(long, value_delimiter = ',')]
    fit: Vec<PathBuf>,
    #[arg(long, default_value = "msp")]
    score: String,
    /// Decision threshold; required unless the score is `msp`, which
    /// defaults to the checkpoint's `eval_threshold`.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn default_data() -> DataSource {
    DataSource::Synthetic(SyntheticConfig::default())
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Config file layout. Every section is optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_data")]
    data: DataSource,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    /// Rows for `sweep-ablation`; the six-row ladder if absent.
    #[serde(default)]
    ablation: Option<Vec<AblationRow>>,
    /// `(known, unknown)` pairs for `sweep-openness`.
    #[serde(default)]
    ratios: Option<Vec<(usize, usize)>>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: default_data(),
            seeds: default_seeds(),
            ablation: None,
            ratios: None,
        }
    }
}

enum CliError {
    Core(openmm::Error),
    Usage(String),
    Io(PathBuf, std::io::Error),
    CheckFailed(String),
}

impl From<openmm::Error> for CliError {
    fn from(e: openmm::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Usage(_) => 1,
            CliError::CheckFailed(_) => 2,
            CliError::Io(..) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::CheckFailed(m) => write!(f, "{m}"),
            CliError::Io(p, e) => write!(f, "I/O error on {}: {e}", p.display()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.into(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(openmm::Error::from)?;
    fs::write(path, text).map_err(|e| CliError::Io(path.into(), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(path.into(), e))
}

fn load(common: &Common) -> Result<(ConfigFile, ExperimentSpec)> {
    let mut cfg: ConfigFile = match &common.config {
        Some(p) => read_json(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    let spec = ExperimentSpec {
        train: cfg.train.clone(),
        data: cfg.data.clone(),
        seeds: cfg.seeds.clone(),
        out_dir: Some(common.out.clone()),
    };
    spec.validate()?;
    Ok((cfg, spec))
}

fn print_report(label: &str, r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!("{label}: OS* {:.2}  UNK {}  HOS {}", r.os_star, opt(r.unk), opt(r.hos));
}

fn gen_data(common: &Common) -> Result<()> {
    let (_, spec) = load(common)?;
    if !matches!(spec.data, DataSource::Synthetic(_)) {
        return Err(CliError::Usage("gen-data needs a synthetic `data` section".into()));
    }
    for &seed in &spec.seeds {
        for task in spec.tasks(seed)? {
            let dir = common.out.join(format!("seed_{seed}"));
            for (d, source) in task.sources.iter().enumerate() {
                write_manifest(source, &dir.join(format!("source_{d}")))?;
            }
            write_manifest(&task.target, &dir.join("target"))?;
            println!(
                "seed {seed}: {} source domain(s), {} target samples → {}",
                task.sources.len(),
                task.target.len(),
                dir.display()
            );
        }
    }
    Ok(())
}

fn train(common: &Common, adapt: bool) -> Result<()> {
    let (_, spec) = load(common)?;
    for &seed in &spec.seeds {
        let cfg = spec.train_config(seed);
        for (i, task) in spec.tasks(seed)?.iter().enumerate() {
            let trained = if adapt {
                train_da(&cfg, &task.sources, &task.target)?
            } else {
                train_dg(&cfg, &task.sources)?
            };
            let dir = common.out.join(format!("task_{i}_seed_{seed}"));
            create_dir(&dir)?;
            save_run(&dir, &cfg, task, &trained)?;
        }
    }
    Ok(())
}

fn save_run(dir: &Path, cfg: &TrainConfig, task: &TaskData, trained: &Trained) -> Result<()> {
    let ck = Checkpoint {
        config: cfg.clone(),
        net: trained.net.clone(),
        perm_set: trained.perm_set.clone(),
    };
    ck.save(&dir.join("model.mmck"))?;
    write_training_log(&trained.history, &dir.join("training_log.csv"))?;
    let eval = evaluate_target(&trained.net, &task.target, ScoreMethod::Msp, cfg.eval_threshold, None)?;
    write_json(&dir.join("report.json"), &eval.report)?;
    if let Some(h) = &eval.report.histogram {
        write_histogram_csv(h, &dir.join("histogram.csv"))?;
    }
    let selected = trained.history.selected.map_or(0, |i| trained.history.epochs[i].epoch);
    print_report(
        &format!("{} seed {} (epoch {selected} selected)", task.name, cfg.seed),
        &eval.report,
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let method: ScoreMethod = args.score.parse()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let target = read_manifest(&args.target)?;
    let fit = if args.fit.is_empty() {
        None
    } else {
        let parts = args.fit.iter().map(|p| read_manifest(p)).collect::<openmm::Result<Vec<_>>>()?;
        Some(Dataset::concat(&parts)?)
    };
    // The checkpoint's default threshold is on the MSP scale.
    let threshold = match (args.threshold, method) {
        (Some(t), _) => t,
        (None, ScoreMethod::Msp) => ck.config.eval_threshold,
        (None, m) => return Err(CliError::Usage(format!("--threshold is required for score `{}`", m.name()))),
    };
    let e = evaluate_target(&ck.net, &target, method, threshold, fit.as_ref())?;
    create_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &e.report)?;
    if let Some(h) = &e.report.histogram {
        write_histogram_csv(h, &args.out.join("histogram.csv"))?;
    }
    print_report(&format!("{} @ {threshold}", method.name()), &e.report);
    Ok(())
}

fn finish_sweep(out: &Path, rows: &[ResultRow]) -> Result<()> {
    create_dir(out)?;
    write_results_csv(rows, &out.join("results.csv"))?;
    let summary = summarize(rows);
    write_json(&out.join("summary.json"), &summary)?;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!("{:<28} {:>10} {:>10} {:>5}", "variant", "mean HOS", "median HOS", "runs");
    for s in &summary {
        println!("{:<28} {:>10} {:>10} {:>5}", s.method_variant, opt(s.mean_hos), opt(s.median_hos), s.runs);
    }
    Ok(())
}

fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("ratio `{s}` must look like `known:unknown`"));
    let (k, u) = s.split_once(':').ok_or_else(bad)?;
    Ok((k.trim().parse().map_err(|_| bad())?, u.trim().parse().map_err(|_| bad())?))
}

fn grad_check_cmd(config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg: GradCheckConfig = match config {
        Some(p) => read_json(p)?,
        None => GradCheckConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = grad_check(&cfg)?;
    println!("{:<24} {:>12} {:>12} {:>8} {:>8}", "group", "max rel err", "max abs err", "entries", "skipped");
    for g in &report.groups {
        println!(
            "{:<24} {:>12.3e} {:>12.3e} {:>8} {:>8}",
            g.group, g.max_rel_error, g.max_abs_error, g.entries, g.kink_skipped
        );
    }
    println!("parameters {}  loss {:.6}  max rel err {:.3e}", report.parameters, report.loss, report.max_rel_error);
    if report.passed(GRAD_CHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: max relative error {:.3e} > {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::TrainDg(c) => train(&c, false),
        Command::TrainDa(c) => train(&c, true),
        Command::Eval(a) => eval(&a),
        Command::SweepAblation(c) => {
            let (cfg, spec) = load(&c)?;
            let rows = cfg.ablation.unwrap_or_else(ablation_ladder);
            finish_sweep(&c.out, &run_ablation(&spec, &rows)?)
        }
        Command::SweepOpenness { common, ratios } => {
            let (cfg, spec) = load(&common)?;
            let ratios = match ratios {
                Some(r) => r.iter().map(|s| parse_ratio(s)).collect::<Result<Vec<_>>>()?,
                None => cfg.ratios.unwrap_or_else(|| vec![(7, 1), (6, 2), (5, 3), (4, 4)]),
            };
            finish_sweep(&common.out, &openness_sweep(&spec, &ratios)?)
        }
        Command::GradCheck { config, seed } => grad_check_cmd(config.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
