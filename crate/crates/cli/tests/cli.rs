use std::path::Path;
use std::process::Command;

use ddgauss_cli::config::{parse_config, Command as Sub, Experiment};
use ddgauss_cli::run::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddgauss"))
}

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn analyze_logistic_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let status = bin()
        .args(args(&format!("analyze --model logistic --p 2 --q 1 --seed 1 --out {out}")))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    let r = read_json(&dir.path().join("analyze.json"));
    assert!((r["x_star"][0].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!((r["rho_star"].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!((r["sigma_star"][0][0].as_f64().unwrap() - 2.0).abs() < 1e-10);
    let meta = read_json(&dir.path().join("analyze.json.meta.json"));
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_seed_exits_with_validation_error() {
    let out = bin()
        .args(args("simulate --model logistic --p 2 --q 1 --scale 100 --horizon 1"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
    assert!(err["error"]["messages"][0].as_str().unwrap().contains("seed"));
}

#[test]
fn runtime_error_is_json() {
    // logistic with q > p has no interior equilibrium.
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(args(&format!(
            "analyze --model logistic --p 1 --q 2 --seed 1 --out {}",
            dir.path().display()
        )))
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["messages"].is_array());
}

#[test]
fn flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    std::fs::write(
        &file,
        r#"{"command":"analyze","model":"logistic","p":3,"q":1,"seed":5,"emit":["flow"],"horizon":2}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let argv = format!("--config {} --p 2 --out {}", file.display(), out.display());
    let cfg = parse_config(args(&argv)).unwrap();
    assert_eq!(cfg.command, Sub::Analyze);
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.overridden, vec!["p".to_string()]);
    run(&cfg).unwrap();
    let r = read_json(&out.join("analyze.json"));
    assert!((r["x_star"][0].as_f64().unwrap() - 1.0).abs() < 1e-10);
    let meta = read_json(&out.join("analyze.json.meta.json"));
    assert_eq!(meta["overridden"][0], "p");
    assert!(out.join("flow.csv").exists());
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    std::fs::write(&file, r#"{"command":"analyze","colour":"red","seed":1}"#).unwrap();
    let e = parse_config(args(&format!("--config {}", file.display()))).unwrap_err();
    assert!(e.iter().any(|m| m.contains("colour")));
    assert!(e.iter().any(|m| m.contains("requires --model")));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let base = "simulate --model logistic --p 2 --q 1 --scale 100 --x0 0.5 --horizon 3 --replicas 3 --emit path,gap,summary --seed 11 --threads 1";
    for d in [&a, &b] {
        let status = bin()
            .args(args(&format!("{base} --out {}", d.path().display())))
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(0));
    }
    let mut n = 0;
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if !name.to_string_lossy().ends_with(".csv") {
            continue;
        }
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
        n += 1;
    }
    assert_eq!(n, 7);
}

#[test]
fn sirs_cost_summary_has_predicted_mean() {
    let dir = tempfile::tempdir().unwrap();
    let argv = format!(
        "experiment sirs-cost --model sirs --lambda 2 --gamma 1 --theta 1 --scale 200 --horizon 50 --replicas 20 --seed 4 --out {}",
        dir.path().display()
    );
    let cfg = parse_config(args(&argv)).unwrap();
    assert_eq!(cfg.command, Sub::Experiment(Experiment::SirsCost));
    run(&cfg).unwrap();
    let s = read_json(&dir.path().join("sirs_cost_summary.json"));
    assert!((s["predicted_mean"].as_f64().unwrap() - 12.5).abs() < 1e-10);
    assert!((s["predicted_variance"].as_f64().unwrap() - 0.21875).abs() < 1e-10);
    let csv = std::fs::read_to_string(dir.path().join("sirs_cost.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("replica,cost,extinct"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn couple_writes_errors_and_tail_report() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(args(&format!(
            "couple --horizon 16 --replicas 1000 --seed 2 --out {} --check",
            dir.path().display()
        )))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("kmt_errors.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("replica,T,error"));
    assert_eq!(csv.lines().count(), 1001);
    let r = read_json(&dir.path().join("tail_report.json"));
    assert_eq!(r["tail_report"]["cells"].as_array().unwrap().len(), 12);
}

#[test]
fn other_experiments_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display();
    let runs = [
        format!("experiment moddev --model logistic --p 2 --q 1 --scale 100 --eta 0.25 --replicas 20 --seed 1 --out {d}"),
        format!("experiment qsd --model logistic --p 2 --q 1 --k-list 20,40 --t 10 --replicas 200 --seed 1 --out {d}"),
        format!("experiment threshold --model logistic --p 2 --q 1 --k-list 50,100 --alpha 1 --horizon 2 --replicas 5 --seed 1 --out {d} --format json"),
    ];
    for r in &runs {
        let cfg = parse_config(args(r)).unwrap();
        let out = run(&cfg).unwrap();
        assert!(!out.artifacts.is_empty(), "{r}");
    }
    for f in ["moddev.csv", "moddev_summary.json", "qsd_K20.csv", "qsd_K40.csv", "qsd_summary.json", "threshold.json", "threshold_summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let q = read_json(&dir.path().join("qsd_summary.json"));
    assert!(q["rows"][0]["exact"].is_object());
}

#[test]
fn failed_check_exits_three() {
    // A tiny K makes the sup gap large, so the coupled-path check fails.
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(args(&format!(
            "simulate --model logistic --p 2 --q 1 --scale 5 --x0 1 --horizon 5 --eps 0.01 --replicas 4 --seed 1 --check --out {}",
            dir.path().display()
        )))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));
}

#[test]
fn no_temp_files_left_behind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(args(&format!(
        "analyze --model sirs --lambda 2 --gamma 1 --theta 1 --emit flow --horizon 1 --seed 1 --out {}",
        dir.path().display()
    )))
    .unwrap();
    run(&cfg).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["analyze.json", "analyze.json.meta.json", "flow.csv", "flow.csv.meta.json"]);
}
