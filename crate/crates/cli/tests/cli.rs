use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbs"))
        .args(args)
        .output()
        .expect("spawn sbs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

/// The liveness scenario is short, so it keeps these tests quick.
fn small_config() -> PathBuf {
    configs().join("liveness.toml")
}

#[test]
fn run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = small_config();
    for out in [&a, &b] {
        let o = sbs(&["run", "--config", path(&cfg), "--seed", "42", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["requests.csv", "passes.csv", "kvband.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.join("requests.csv")).unwrap();
    assert!(header
        .starts_with("id,arrival,dispatch,prefill_start,first_token,completion,scheduler_wait,device_wait,ttft\n"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let o = sbs(&["run", "--config", path(&cfg), "--seed", "7", "--out", path(tmp.path())]);
    assert!(o.status.success());
    let s = summary(tmp.path());
    assert_eq!(s["seed"], 7);
    assert_eq!(s["config"]["seed"], 7);
    assert_eq!(s["config"]["cluster"]["iqr_k"], 1.5, "defaults are echoed");
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let src = fs::read_to_string(small_config())
        .unwrap()
        .replace("l_net = 0.005", "l_net = 0.005\nl_nett = 1.0");
    fs::write(&bad, src).unwrap();
    let o = sbs(&["run", "--config", path(&bad), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 12"), "{err}");
    assert!(err.contains("l_nett"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let o = sbs(&["run", "--config", "/nonexistent/x.toml", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failing_check_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("check.toml");
    let src = fs::read_to_string(small_config()).unwrap() + "\n[check]\nmax_mean_ttft = 0.001\n";
    fs::write(&cfg, src).unwrap();
    let o = sbs(&["run", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("o/summary.json").exists(), "outputs are still written");
}

#[test]
fn unattainable_slo_exits_two() {
    let o = sbs(&[
        "peak",
        "--config",
        path(&configs().join("short.toml")),
        "--slo-ttft",
        "0.001",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not met"));
}

#[test]
fn bad_lists_are_config_errors() {
    let cfg = small_config();
    let o = sbs(&[
        "compare",
        "--config",
        path(&cfg),
        "--out",
        "/tmp/never",
        "--schedulers",
        "sbs,fifo",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = sbs(&[
        "sweep",
        "--config",
        path(&cfg),
        "--out",
        "/tmp/never",
        "--loads",
        "40,abc",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_shares_the_workload() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbs(&[
        "compare",
        "--config",
        path(&small_config()),
        "--out",
        path(tmp.path()),
        "--schedulers",
        "sbs,immediate,round_robin",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let digests: Vec<serde_json::Value> = ["sbs", "immediate", "round_robin"]
        .iter()
        .map(|s| summary(&tmp.path().join(s))["workload_digest"].clone())
        .collect();
    assert!(digests[0].is_string());
    assert!(digests.iter().all(|d| *d == digests[0]));
}

#[test]
fn sweep_writes_one_directory_per_load() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbs(&[
        "sweep",
        "--config",
        path(&configs().join("short.toml")),
        "--out",
        path(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for load in ["load_40", "load_60", "load_80", "load_100"] {
        assert!(tmp.path().join(load).join("requests.csv").exists(), "{load}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["points"].as_array().unwrap().len(), 4);
}

#[test]
fn peak_saturates_without_slo() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sbs(&[
        "peak",
        "--config",
        path(&configs().join("oracle.toml")),
        "--slo-ttft",
        "1e9",
        "--out",
        path(tmp.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let peak: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("peak.json")).unwrap()).unwrap();
    assert_eq!(peak["peak"], peak["probes"][1]["rate"]);
    assert_eq!(peak["probes"].as_array().unwrap().len(), 2);
}
