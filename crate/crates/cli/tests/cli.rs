use std::fs;
use std::path::Path;
use std::process::Command as Proc;

use drm_core::trainer::{ExperimentConfig, HeadMode};
use drm_lab::{parse_args, run, Action, CliError};
use serde_json::Value;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_drm-lab"))
}

fn argv(s: &str) -> Vec<String> {
    std::iter::once("drm-lab").chain(s.split_whitespace()).map(String::from).collect()
}

fn run_ok(s: &str) {
    let cmd = parse_args(argv(s)).unwrap_or_else(|e| panic!("{s}: {e}"));
    run(&cmd).unwrap_or_else(|e| panic!("{s}: {e}"));
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn train_flags_resolve() {
    let cmd = parse_args(argv("train --alpha 5 --beta 0.95 --seed 1 --data d.bin --out runs/a")).unwrap();
    assert_eq!(cmd.action, Action::Train);
    assert_eq!(cmd.config.alpha, 5.0);
    assert_eq!(cmd.config.beta, 0.95);
    assert_eq!(cmd.config.seed, 1);
    assert_eq!(cmd.config.data.as_deref(), Some(Path::new("d.bin")));
    assert_eq!(cmd.config.steps, ExperimentConfig::default().steps);
}

#[test]
fn negative_alpha_is_usage_error() {
    let err = parse_args(argv("train --alpha -1 --data d --out o")).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_flag_and_missing_path_rejected() {
    assert!(matches!(parse_args(argv("train --data d --out o --gamma 3")), Err(CliError::Usage(_))));
    assert!(matches!(parse_args(argv("train --out o")), Err(CliError::Usage(_))));
    assert!(matches!(parse_args(argv("train --data d")), Err(CliError::Usage(_))));
    assert!(matches!(parse_args(argv("verify-theorems")), Err(CliError::Usage(_))));
}

#[test]
fn no_args_prints_usage_with_code_2() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn flags_override_file_override_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"alpha": 2.0, "steps": 7, "hidden": [4]}"#).unwrap();
    let cmd = parse_args(argv(&format!("train --config {} --steps 9 --data d --out o", p(&cfg)))).unwrap();
    assert_eq!(cmd.config.alpha, 2.0);
    assert_eq!(cmd.config.steps, 9);
    assert_eq!(cmd.config.hidden, vec![4]);
    assert_eq!(cmd.config.lr_head, ExperimentConfig::default().lr_head);

    // Fields missing from the file come from the chosen preset.
    let cmd = parse_args(argv(&format!("train --preset desk --config {} --data d --out o", p(&cfg)))).unwrap();
    assert_eq!(cmd.config.lr_head, ExperimentConfig::desk_scale().lr_head);
    assert_eq!(cmd.config.steps, 7);

    fs::write(&cfg, r#"{"alpah": 2.0}"#).unwrap();
    let err = parse_args(argv(&format!("train --config {} --data d --out o", p(&cfg)))).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));
}

#[test]
fn mode_flags() {
    let c = parse_args(argv("train --erm-baseline --data d --out o")).unwrap().config;
    assert_eq!((c.alpha, c.head, c.erm_term), (0.0, HeadMode::Deterministic, true));
    let c = parse_args(argv("train --freeze-sigma --data d --out o")).unwrap().config;
    assert_eq!((c.alpha, c.head), (5.0, HeadMode::Deterministic));
    let c = parse_args(argv("train --no-cdr --data d --out o")).unwrap().config;
    assert_eq!((c.alpha, c.head), (0.0, HeadMode::Bayesian));
    assert!(parse_args(argv("train --no-cdr --alpha 3 --data d --out o")).is_err());
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&format!("gen-data --seed 4 --samples-per-domain 100 --out {}", p(&a)));
    run_ok(&format!("gen-data --seed 4 --samples-per-domain 100 --out {}", p(&b)));
    for f in ["sources.bin", "target.bin", "sources.bin.json", "target.bin.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    run_ok(&format!("gen-data --seed 5 --samples-per-domain 100 --out {}", p(&c)));
    assert_ne!(fs::read(a.join("sources.bin")).unwrap(), fs::read(c.join("sources.bin")).unwrap());
}

fn small_data(root: &Path) -> (String, String) {
    let d = root.join("data");
    run_ok(&format!("gen-data --seed 1 --samples-per-domain 120 --out {}", p(&d)));
    (p(&d.join("sources.bin")), p(&d.join("target.bin")))
}

#[test]
fn train_writes_artifacts_and_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = small_data(dir.path());
    let a = dir.path().join("a");
    run_ok(&format!(
        "train --preset desk --steps 60 --seed 2 --data {src} --target {tgt} --out {}",
        p(&a)
    ));
    for f in ["config.json", "metrics.csv", "timing.csv", "final.bin", "best.bin"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,erm_loss,cdr,total,elbo,val_acc"));

    let b = dir.path().join("b");
    run_ok(&format!("train --config {} --out {}", p(&a.join("config.json")), p(&b)));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("final.bin")).unwrap(), fs::read(b.join("final.bin")).unwrap());
}

#[test]
fn evaluate_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = small_data(dir.path());
    let (drm, erm) = (dir.path().join("drm"), dir.path().join("erm"));
    let common = format!("--preset desk --steps 40 --data {src} --target {tgt}");
    run_ok(&format!("train {common} --out {}", p(&drm)));
    run_ok(&format!("train {common} --erm-baseline --out {}", p(&erm)));

    run_ok(&format!("evaluate --run {}", p(&drm)));
    let report: Value = serde_json::from_str(&fs::read_to_string(drm.join("report.json")).unwrap()).unwrap();
    assert!(report["target_accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["per_domain"].as_array().unwrap().len(), 3);

    let cmp = dir.path().join("cmp");
    run_ok(&format!("compare --drm {} --erm {} --out {}", p(&drm), p(&erm), p(&cmp)));
    let doc: Value = serde_json::from_str(&fs::read_to_string(cmp.join("comparison.json")).unwrap()).unwrap();
    let d = doc["deltas"]["target_accuracy"].as_f64().unwrap();
    let expect = doc["drm"]["target_accuracy"].as_f64().unwrap() - doc["erm"]["target_accuracy"].as_f64().unwrap();
    assert!((d - expect).abs() < 1e-12);
    assert!(cmp.join("plot.csv").exists());

    // Runs on different seeds are not comparable.
    let other = dir.path().join("other");
    run_ok(&format!("train {common} --seed 9 --erm-baseline --out {}", p(&other)));
    let err = run(&parse_args(argv(&format!("compare --drm {} --erm {} --out {}", p(&drm), p(&other), p(&cmp)))).unwrap())
        .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn compare_with_missing_run_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["compare", "--drm"])
        .arg(dir.path().join("nope"))
        .arg("--erm")
        .arg(dir.path().join("nope2"))
        .arg("--out")
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn runtime_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--data"])
        .arg(dir.path().join("missing.bin"))
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = small_data(dir.path());
    let out = dir.path().join("abl");
    run_ok(&format!(
        "ablate --preset desk --steps 20 --seeds 0,1 --data {src} --target {tgt} --out {}",
        p(&out)
    ));
    let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["target_accuracy"].as_array().unwrap().len() == 2));
}

#[test]
fn verify_theorems_writes_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("th");
    run_ok(&format!(
        "verify-theorems --quick --steps 50 --trials 10 --transfer-seeds 2 --out {}",
        p(&out)
    ));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("theorems.json")).unwrap()).unwrap();
    assert!(doc["passed"].is_boolean());
    let checks = doc["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 4);
    assert!(checks.iter().all(|c| c["passed"].is_boolean() && c["name"].is_string()));
}
