use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hyperlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperlab"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("spawn hyperlab")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Desk config shortened to `steps` steps.
fn short_config(dir: &Path, steps: u64) -> PathBuf {
    let text = fs::read_to_string(root().join("configs/desk_copy_d2.toml")).unwrap();
    let text = text.replace("tokens = 51200", &format!("tokens = {}", steps * 256));
    assert!(text.contains(&format!("tokens = {}", steps * 256)));
    let path = dir.join("short.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn power_fit_of_token_budgets() {
    let v = json(&hyperlab(&["fit", "--power", "data/token_budget_optima.csv"]));
    assert!((v["exponent"].as_f64().unwrap() - 0.32).abs() < 0.005);
    assert_eq!(v["floor"].as_f64().unwrap(), 0.0);
}

#[test]
fn floored_fit_of_muon_column() {
    let v = json(&hyperlab(&["fit", "--power", "--floor", "data/compute_muon.csv"]));
    assert!((v["floor"].as_f64().unwrap() - 1.23).abs() <= 0.15, "{v}");
}

#[test]
fn loo_and_flops() {
    let v = json(&hyperlab(&["loo", "data/token_budget_optima.csv"]));
    let e = v["loo_mean_abs_rel_err_pct"].as_f64().unwrap();
    assert!((1.0..=2.0).contains(&e));

    let v = json(&hyperlab(&["flops", "--config", "configs/full_scale_d8.toml"]));
    let f = v["flops"].as_f64().unwrap();
    assert!((f / 2.14e19 - 1.0).abs() < 0.05, "{f}");
    assert_eq!(v["vocab"].as_u64(), Some(32_000));
}

#[test]
fn cel_against_muon_baseline() {
    let v = json(&hyperlab(&[
        "cel",
        "data/compute_muon.csv",
        "--floor",
        "--flops",
        "5.96e21",
        "--loss",
        "1.9015",
    ]));
    assert!((v["cel"].as_f64().unwrap() - 0.70).abs() <= 0.08);
    let out = hyperlab(&["cel", "data/compute_muon.csv", "--floor", "--flops", "1e21", "--loss", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sensitivity_over_all_subset_sizes() {
    let v = json(&hyperlab(&["sensitivity", "data/depth_sweep_scaled_d16.csv"]));
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.last().unwrap()["lr_rel_err_pct"].as_f64(), Some(0.0));
}

#[test]
fn exit_codes() {
    assert_eq!(hyperlab(&["fit", "missing.csv"]).status.code(), Some(2));
    assert_eq!(hyperlab(&["train", "--config", "configs/desk_copy_d2.toml", "--scheme", "nope"]).status.code(), Some(2));
    assert_eq!(hyperlab(&["bogus"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let concave = dir.path().join("concave.csv");
    fs::write(&concave, "lr,loss\n0.01,1.0\n0.02,1.5\n0.04,1.0\n").unwrap();
    assert_eq!(hyperlab(&["fit", concave.to_str().unwrap()]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "tokens = \"many\"\n").unwrap();
    assert_eq!(hyperlab(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn train_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 20);
    let out_dir = dir.path().join("run");
    let v = json(&hyperlab(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(v["steps"].as_u64(), Some(20));
    let log = fs::read_to_string(out_dir.join("log.jsonl")).unwrap();
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["stability"]["attn_z"].as_f64().unwrap() >= 0.0);
    }
    let saved = fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 3"));
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 10);
    let sweep_dir = dir.path().join("d2");
    let out = hyperlab(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "0.01,0.02,0.04,0.08,0.16",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("lr,loss,status\n"), "{stdout}");
    assert!(matches!(out.status.code(), Some(0) | Some(1)));

    let plot = dir.path().join("plots/lr.csv");
    let res = hyperlab(&["plotdata", "lr", sweep_dir.to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&plot).unwrap();
    assert!(text.starts_with("series,kind,lr,loss\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("d2,observed,")).count(), 5);
}

#[test]
fn compute_plots() {
    let out = hyperlab(&["plotdata", "flops", "--floor", "data/compute_muon.csv", "data/compute_muonh.csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("series,kind,flops,loss\n"));
    assert!(text.contains("compute_muonh,fit,"));

    let out = hyperlab(&[
        "plotdata",
        "cel",
        "--floor",
        "--baseline",
        "data/compute_muon.csv",
        "data/compute_muonh_hyperp.csv",
        "data/compute_muonh.csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("series,flops,loss,cel\n"));
}

#[test]
fn quick_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperlab(&["verify", "--quick", "--out", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("ln_jacobian"));
    assert!(!stdout.contains("FAIL"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["theorems"].as_array().unwrap().len(), 11);
}
