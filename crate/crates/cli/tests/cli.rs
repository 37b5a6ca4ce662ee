use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moneta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moneta"))
        .args(args)
        .env_remove("MONETA_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SWEEP: &str = r#"
experiment_kind = "threshold-sweep"
thresholds = [1.5, 3.0, 8.0]
[params]
n_agents = 8
turns_horizon = 50
n_realizations = 3
"#;

const LIFETIMES: &str = r#"
experiment_kind = "lifetimes"
thresholds = [2.0]
[params]
n_agents = 6
turns_horizon = 20000
n_realizations = 2
lifetime_low_cutoff = 1
lifetime_high_cutoff = 10000
"#;

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = moneta(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(
        moneta(&["validate", "--config", "x", "--bogus"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn validate_rejects_bad_config_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "experiment_kind = \"threshold-sweep\"\nparams = { n_agents = 5, turns_horizon = 5, n_realizations = 1 }\noutput_dir = \"never\"\n");
    let out = moneta(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["error"], "config");
    assert!(line["message"].as_str().unwrap().contains("thresholds"));
    assert!(!dir.path().join("never").exists());
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["fig1", "fig2", "fig4"] {
        let path = format!("{}/../../configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
        let out = moneta(&["validate", "--config", &path]);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn sweep_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out_dir = dir.path().join("out");
    let out = moneta(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "T,N,mean_vmax,mean_vmax_over_n,stderr");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1.5,8,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"][0]["path"], "sweep.csv");
    assert_eq!(manifest["workers"], 2);
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out = moneta(&["lifetimes", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_streams_one_realization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out = moneta(&[
        "run",
        "--config",
        &cfg,
        "--threshold",
        "3",
        "--realization",
        "1",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.lines().nth(1).unwrap().starts_with("1,1,"));
    // Ambiguous threshold without --threshold.
    assert_eq!(moneta(&["run", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn lifetimes_then_refit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "life.toml", LIFETIMES);
    let out_dir = dir.path().join("life");
    let out = moneta(&[
        "lifetimes",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let hist = out_dir.join("T2/histogram.csv");
    let header = fs::read_to_string(&hist).unwrap();
    assert!(header.starts_with("bin_lo,bin_hi,center,count,density\n"));

    let refit = dir.path().join("refit.json");
    let out = moneta(&[
        "fit",
        "--in",
        hist.to_str().unwrap(),
        "--window",
        "1:1e3",
        "--out",
        refit.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(refit).unwrap()).unwrap();
    for key in ["A", "alpha", "alpha_stderr", "window", "n_bins_used"] {
        assert!(fit.get(key).is_some(), "missing {key}");
    }
    assert_eq!(fit["window"], serde_json::json!([1.0, 1000.0]));
}

#[test]
fn fit_rejects_malformed_window() {
    assert_eq!(
        moneta(&["fit", "--in", "h.csv", "--window", "1e5:1e3"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn workers_env_must_be_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out = Command::new(env!("CARGO_BIN_EXE_moneta"))
        .args([
            "sweep",
            "--config",
            &cfg,
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .env("MONETA_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MONETA_WORKERS"));
}
