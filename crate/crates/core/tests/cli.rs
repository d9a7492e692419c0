//! End-to-end tests of the `crisp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crisp::continual_engine::IterationLog;
use crisp::Matrix;

const SMALL: &str = "seed = 3\n[generator]\nvideos_per_category = 4\n[train]\niterations_per_step = 3\n";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let body = format!(
            "output_dir = {:?}\n{SMALL}{extra}",
            root.join("out").display().to_string()
        );
        fs::write(root.join("experiment.toml"), body).unwrap();
        Self { _dir: dir, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn crisp(&self, args: &[&str]) -> Output {
        let config = self.root.join("experiment.toml");
        Command::new(env!("CARGO_BIN_EXE_crisp"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .env_remove("CRISP_OUTPUT_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.crisp(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

/// The single stderr line of a failed invocation.
fn failure(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("crisp-error: "), "{err}");
    err
}

fn logs(path: &Path) -> Vec<IterationLog> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_writes_step_files_and_guards_them() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    for t in 0..3 {
        assert!(ws.out().join(format!("step{t}.json")).exists());
        assert!(ws.out().join(format!("step{t}.features.bin")).exists());
    }
    let err = failure(&ws.crisp(&["generate"]));
    assert!(err.contains("contract-error") && err.contains("--force"), "{err}");
    ws.ok(&["generate", "--force"]);
}

#[test]
fn unknown_config_key_is_named() {
    let ws = Workspace::new("lr = 0.1\n");
    let err = failure(&ws.crisp(&["generate"]));
    assert!(err.starts_with("crisp-error: config-error"), "{err}");
    assert!(err.contains("`lr`") && err.contains("line 7"), "{err}");
}

#[test]
fn run_without_datasets_names_the_missing_file() {
    let ws = Workspace::new("");
    let err = failure(&ws.crisp(&["run"]));
    assert!(err.contains("io-error") && err.contains("step0.json"), "{err}");
}

#[test]
fn run_writes_report_checkpoints_and_log() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let summary = ws.ok(&["run"]);
    assert!(summary.contains("FR "), "{summary}");
    let report = ws.out().join("report.json");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let steps = json["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    for key in ["step", "classes", "mAP", "AP50", "AP75", "AR1", "AR10"] {
        assert!(steps[0].get(key).is_some(), "missing {key}");
    }
    assert!(json["FR"].is_number());
    for t in 0..3 {
        let ckpt = fs::read_to_string(ws.out().join(format!("checkpoints/step{t}.ckpt"))).unwrap();
        assert!(ckpt.starts_with("crisp-checkpoint v1\n"));
    }
    assert_eq!(logs(&ws.out().join("train_log.jsonl")).len(), 9);
    let printed = ws.ok(&["report"]);
    assert_eq!(printed, summary);
    assert!(failure(&ws.crisp(&["run"])).contains("--force"));
}

#[test]
fn ablate_no_ic_zeroes_the_correlation_terms() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["run", "--ablate", "no-ic", "--ablate", "no-isc"]);
    let entries = logs(&ws.out().join("train_log.jsonl"));
    assert!(entries
        .iter()
        .all(|l| l.ic == 0.0 && l.ic_aux.is_empty() && l.isc == 0.0));
    ws.ok(&["run", "--force"]);
    let entries = logs(&ws.out().join("train_log.jsonl"));
    assert!(entries.iter().any(|l| l.step > 0 && l.ic > 0.0 && !l.ic_aux.is_empty()));
}

#[test]
fn init_choice_only_affects_incremental_steps() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["run", "--init", "pca"]);
    let pca = fs::read_to_string(ws.out().join("report.json")).unwrap();
    let pca_step0 = fs::read(ws.out().join("checkpoints/step0.ckpt")).unwrap();
    ws.ok(&["run", "--force", "--init", "replicate_average"]);
    let rep = fs::read_to_string(ws.out().join("report.json")).unwrap();
    assert_eq!(fs::read(ws.out().join("checkpoints/step0.ckpt")).unwrap(), pca_step0);
    let parse = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap();
    assert_eq!(parse(&pca)["steps"][0], parse(&rep)["steps"][0]);
    assert_ne!(pca, rep);
}

#[test]
fn diagnose_writes_correlation_distances_and_embeddings() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["run"]);
    let ckpt = ws.out().join("checkpoints/step2.ckpt");
    let summary = ws.ok(&["diagnose", ckpt.to_str().unwrap()]);
    assert!(summary.contains("task 2"), "{summary}");
    let dir = ws.out().join("diagnostics");
    let corr = Matrix::from_text(&fs::read_to_string(dir.join("step2.correlation.txt")).unwrap()).unwrap();
    let dist = Matrix::from_text(&fs::read_to_string(dir.join("step2.distances.txt")).unwrap()).unwrap();
    // 5 queries per base class, then one per incremental class.
    let n = 5 * 4 + 2 + 2;
    assert_eq!(corr.shape(), (n, n));
    assert_eq!(dist.shape(), (n, n));
    for i in 0..n {
        assert!((corr.get(i, i) - 1.0).abs() < 1e-12);
        assert_eq!(dist.get(i, i), 0.0);
    }
    let csv = fs::read_to_string(dir.join("step2.embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), n + 1);
    assert!(csv.starts_with("label,dim0,"));
}

#[test]
fn replicate_init_checkpoint_has_unit_incremental_correlation() {
    let ws = Workspace::new("[ablation]\ninit_strategy = \"replicate_average\"\n");
    let config = ws.root.join("experiment.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("iterations_per_step = 3", "iterations_per_step = 0");
    fs::write(&config, text).unwrap();
    ws.ok(&["generate"]);
    ws.ok(&["run"]);
    let ckpt = ws.out().join("checkpoints/step1.ckpt");
    ws.ok(&["diagnose", ckpt.to_str().unwrap()]);
    let corr =
        Matrix::from_text(&fs::read_to_string(ws.out().join("diagnostics/step1.correlation.txt")).unwrap()).unwrap();
    for i in 20..22 {
        for j in 20..22 {
            assert_eq!(corr.get(i, j), 1.0);
        }
    }
}

#[test]
fn diagnose_rejects_other_checkpoint_versions() {
    let ws = Workspace::new("");
    let bad = ws.root.join("old.ckpt");
    fs::write(&bad, "crisp-checkpoint v2\nstep none\n").unwrap();
    let err = failure(&ws.crisp(&["diagnose", bad.to_str().unwrap()]));
    assert!(
        err.contains("parse-error") && err.contains("crisp-checkpoint v1"),
        "{err}"
    );
}

#[test]
fn output_dir_env_overrides_config() {
    let ws = Workspace::new("");
    let elsewhere = ws.root.join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_crisp"))
        .arg("--config")
        .arg(ws.root.join("experiment.toml"))
        .arg("generate")
        .env("CRISP_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("step0.json").exists());
    assert!(!ws.out().exists());
}

#[test]
fn report_rejects_malformed_files() {
    let ws = Workspace::new("");
    fs::create_dir_all(ws.out()).unwrap();
    fs::write(ws.out().join("report.json"), "{\"steps\": []}").unwrap();
    let err = failure(&ws.crisp(&["report"]));
    assert!(err.contains("parse-error"), "{err}");
}

#[test]
fn usage_errors_are_single_line() {
    let ws = Workspace::new("");
    let err = failure(&ws.crisp(&["run", "--ablate", "no-everything"]));
    assert!(err.starts_with("crisp-error: usage-error"), "{err}");
    let err = failure(&ws.crisp(&["frobnicate"]));
    assert!(err.starts_with("crisp-error: usage-error"), "{err}");
    let help = ws.ok(&["--help"]);
    assert!(help.contains("diagnose"));
}

#[test]
fn literal_indicator_reports_zero_forgetting() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["run", "--fr-indicator", "literal"]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.out().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["FR"].as_f64(), Some(0.0));
    assert_eq!(json["fr_indicator"], "literal");
}
