use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "train": {"embed_dim": 8, "jigsaw_parts": 2, "jigsaw_permutations": 6, "jigsaw_hidden": 16, "epochs": 2, "lr": 0.001},
  "data": {"synthetic": {"latent_dim": 6, "modality_dims": [8, 6], "n_known": 3, "n_unknown": 1, "samples_per_class": 10}},
  "seeds": [0, 1]
}"#;

fn openmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openmm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = setup();
    let d = dir.path();
    let o = openmm(d, &["gen-data", "--config", "small.json", "--seed", "0", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for domain in ["source_0", "source_1", "target"] {
        assert!(d.join("data/seed_0").join(domain).join("manifest.json").exists());
    }

    let o = openmm(d, &["train-dg", "--config", "small.json", "--seed", "0", "--out", "dg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.join("dg/task_0_seed_0");
    for file in ["model.mmck", "training_log.csv", "report.json", "histogram.csv"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert!(report["hos"].is_number());

    let o = openmm(
        d,
        &["eval", "--checkpoint", "dg/task_0_seed_0/model.mmck", "--target", "data/seed_0/target", "--out", "ev"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // The generator is deterministic, so the checkpoint scores its own target identically.
    assert_eq!(fs::read(d.join("ev/report.json")).unwrap(), fs::read(run.join("report.json")).unwrap());

    let o = openmm(
        d,
        &[
            "eval", "--checkpoint", "dg/task_0_seed_0/model.mmck", "--target", "data/seed_0/target",
            "--score", "mahalanobis", "--fit", "data/seed_0/source_0,data/seed_0/source_1",
            "--threshold", "-50", "--out", "ev2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = openmm(
        d,
        &["eval", "--checkpoint", "dg/task_0_seed_0/model.mmck", "--target", "data/seed_0/target", "--score", "energy"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn train_da_writes_a_run_per_seed() {
    let dir = setup();
    let o = openmm(dir.path(), &["train-da", "--config", "small.json", "--seeds", "3,4", "--out", "da"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("da/task_0_seed_3/model.mmck").exists());
    assert!(dir.path().join("da/task_0_seed_4/model.mmck").exists());
}

#[test]
fn ablation_sweep_is_byte_identical_across_runs() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = openmm(dir.path(), &["sweep-ablation", "--config", "small.json", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/results.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 * 2);
    assert!(text.starts_with("task,seed,method_variant,os_star,unk,hos,threshold,score_method\n"));
}

#[test]
fn openness_sweep_reports_each_ratio() {
    let dir = setup();
    let o = openmm(dir.path(), &["sweep-openness", "--config", "small.json", "--seed", "0", "--ratios", "3:1,2:2", "--out", "op"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("op/results.csv")).unwrap();
    let variants: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(variants, ["3:1", "2:2"]);
}

#[test]
fn grad_check_passes_on_the_default_micro_config() {
    let dir = setup();
    let o = openmm(dir.path(), &["grad-check", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("head-joint"));
    fs::write(dir.path().join("big.json"), r#"{"input_dims": [400, 400], "embed_dim": 32}"#).unwrap();
    let o = openmm(dir.path(), &["grad-check", "--config", "big.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"train": {"tau": 3}}"#).unwrap();
    let o = openmm(d, &["train-dg", "--config", "bad.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));

    fs::write(d.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&openmm(d, &["train-dg", "--config", "typo.json"])), 1);
    assert_eq!(code(&openmm(d, &["train-dg", "--config", "missing.json"])), 3);
    assert_eq!(code(&openmm(d, &["sweep-openness", "--config", "small.json", "--ratios", "3:3"])), 1);
    assert_eq!(code(&openmm(d, &["eval", "--checkpoint", "nope.mmck", "--target", "."])), 3);

    fs::write(d.join("nan.json"), r#"{"train": {"lr": 1e300, "epochs": 2, "embed_dim": 8, "jigsaw_parts": 2,
        "jigsaw_permutations": 6, "jigsaw_hidden": 16},
        "data": {"synthetic": {"latent_dim": 6, "modality_dims": [8, 6], "n_known": 3, "samples_per_class": 10}}}"#)
        .unwrap();
    let o = openmm(d, &["train-dg", "--config", "nan.json"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
