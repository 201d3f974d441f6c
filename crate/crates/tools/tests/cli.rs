use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn epd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epd")).args(args).output().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not a JSON record: {text}"))
}

const TINY: &str = r#"
solvers = ["ddim", "heun", "ipndm", "epd", "epd_plugin"]
budgets = [3, 4]
eval_samples = 6
export_trajectories = 1

[reference]
steps = 64

[train]
iterations = 2
samples = 8
batch_size = 4
k = 2

[train.schedule]
kind = "polynomial"
rho = 7.0
steps = 2
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn help_lists_budget_table() {
    let out = epd(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("budget B -> (B + 1) / 2 steps"));
    for cmd in ["teacher", "train", "sample", "compare", "bench", "validate-params"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn validate_params_accepts_fixtures() {
    let out = epd(&["validate-params", fixtures().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 32);
}

#[test]
fn validate_params_rejects_bad_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("table8a_cifar10_nfe3.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["steps"][0][0]["lambda"] = (v["steps"][0][0]["lambda"].as_f64().unwrap() + 0.01).into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let rec = error_record(&epd(&["validate-params", path.to_str().unwrap()]));
    assert_eq!(rec["error"], "validation");
    assert!(rec["message"].as_str().unwrap().contains("step 0"));
}

#[test]
fn compare_writes_metrics_and_skips_unreachable_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = epd(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("solver,k,para_nfe,nfe,seeds,endpoint_error"));
    assert!(metrics.contains("skipped: heun with AFS needs an odd budget"));
    assert!(metrics.lines().any(|l| l.starts_with("epd_plugin,2,3,") && l.ends_with(",ok")));
    assert!(out_dir.join("traj_epd_k2_nfe3_0.csv").exists());
    assert!(out_dir.join("trainlog_epd_plugin_k2_nfe3.csv").exists());
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];

    let mut args = vec!["train", "--budget", "5", "--k", "1"];
    args.extend(common);
    let out = epd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 3);
    assert_eq!(summary["k"], 1);

    let params = out_dir.join("params.json");
    let mut args = vec!["sample", "--params", params.to_str().unwrap(), "--samples", "3"];
    args.extend(common);
    let out = epd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["para_nfe"], 5);
    let endpoints = std::fs::read_to_string(out_dir.join("endpoints_epd.csv")).unwrap();
    assert_eq!(endpoints.lines().count(), 4);
}

#[test]
fn teacher_and_baseline_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("t");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "5"];

    let mut args = vec!["teacher"];
    args.extend(common);
    let out = epd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let teacher = std::fs::read_to_string(out_dir.join("teacher.csv")).unwrap();
    // 8 samples x 3 nodes plus header.
    assert_eq!(teacher.lines().count(), 25);

    let mut args = vec!["sample", "--solver", "ipndm", "--budget", "3"];
    args.extend(common);
    let out = epd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("endpoints_ipndm_nfe3.csv").exists());

    let mut args = vec!["sample", "--solver", "dpm2", "--budget", "4"];
    args.extend(common);
    let rec = error_record(&epd(&args));
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("odd budget"));
}

#[test]
fn bench_writes_latency_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("b");
    let out = epd(&[
        "bench",
        "--cost-ms",
        "1",
        "--cost-mode",
        "block",
        "--reps",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("latency.csv")).unwrap();
    assert!(csv.starts_with("K,workers,mean_ms,ci95_ms,reps"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn bad_inputs_give_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "eval_samples = 0").unwrap();
    let rec = error_record(&epd(&["compare", "--config", cfg.to_str().unwrap()]));
    assert_eq!(rec["error"], "config");

    let rec = error_record(&epd(&["compare", "--config", "/nonexistent/x.toml"]));
    assert_eq!(rec["error"], "io");

    std::fs::write(&cfg, "budgets = \"three\"").unwrap();
    let rec = error_record(&epd(&["compare", "--config", cfg.to_str().unwrap()]));
    assert_eq!(rec["error"], "parse");

    let rec = error_record(&epd(&["compare", "--workers", "0"]));
    assert_eq!(rec["error"], "config");
}
