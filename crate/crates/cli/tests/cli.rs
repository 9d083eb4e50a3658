use std::path::Path;
use std::process::{Command, Output};

fn moesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesim"))
        .args(args)
        .env_remove("MOESIM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 6] = [
    "--set",
    "workload.n_layers=6",
    "--set",
    "run.token_budget=48",
    "--set",
    "scheduler.warmup_steps=4",
];

fn small_args<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn calc_omega_prints_eight_decimals() {
    let o = moesim(&["calc", "omega", "--gamma", "8", "--alpha", "0.8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "4.32891136");
    let o = moesim(&["calc", "breakeven", "--gamma", "8", "--alpha", "0.8", "--ratio", "4.13"]);
    assert_eq!(stdout(&o).trim(), "true");
    let o = moesim(&["calc", "omega", "--gamma", "8", "--alpha", "1.5"]);
    assert!(!o.status.success());
}

#[test]
fn missing_trace_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("trace.txt");
    let set = format!("workload.trace=\"{}\"", missing.display());
    let out = dir.path().join("out");
    let o = moesim(&["run", "--set", &set, "--out-dir", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

fn data_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("#moesim-metrics v1"));
    lines.skip(1).map(str::to_string).collect()
}

#[test]
fn sweep_writes_one_row_per_point_in_axis_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = small_args(&["sweep", "cache_ratio", "0.09..0.21", "--step", "0.02", "--out-dir", out]);
    let o = moesim(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_rows(&dir.path().join("sweep_cache_ratio.csv"));
    assert_eq!(rows.len(), 7);
    let axis: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(axis, ["0.09", "0.11", "0.13", "0.15", "0.17", "0.19", "0.21"]);
    let points = std::fs::read_dir(dir.path().join("points")).unwrap().count();
    assert_eq!(points, 7);
}

#[test]
fn echoed_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = small_args(&["run", "--policy", "fixed_tau:2", "--out-dir", a.to_str().unwrap()]);
    args.extend(["--set", "workload.drift_scale=0.037", "--set", "run.format=\"jsonl\""]);
    let o = moesim(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = a.join("effective_config.toml");
    let text = std::fs::read_to_string(&echo).unwrap();
    assert!(text.contains("policy = \"fixed_tau:2\""), "{text}");
    let o = moesim(&["run", "--config", echo.to_str().unwrap(), "--out-dir", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_args(&["run"]);
    let o = Command::new(env!("CARGO_BIN_EXE_moesim"))
        .args(&args)
        .env("MOESIM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&dir.path().join("metrics.csv")).len(), 1);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[scheduler]\ncache_ration = 0.2\n").unwrap();
    let o = moesim(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cache_ration"), "{}", stderr(&o));
    std::fs::write(&cfg, "[schedular]\n").unwrap();
    assert!(!moesim(&["run", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn gen_trace_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("t1.txt");
    let t2 = dir.path().join("t2.txt");
    for t in [&t1, &t2] {
        let args = small_args(&["gen-trace", "--steps", "30", "--out", t.to_str().unwrap()]);
        let o = moesim(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(&t1).unwrap();
    assert_eq!(a, std::fs::read(&t2).unwrap());
    let head = String::from_utf8_lossy(&a);
    let first = head.lines().next().unwrap();
    for field in ["layers=6", "experts=128", "k=8", "gamma=8"] {
        assert!(first.contains(field), "{first}");
    }

    let set = format!("workload.trace=\"{}\"", t1.display());
    let out = dir.path().join("replay");
    let o = moesim(&["run", "--set", &set, "--set", "run.token_budget=48", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("metrics.csv")).len(), 1);
}

#[test]
fn gen_trace_rejects_top_k_above_experts() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    let o = moesim(&["gen-trace", "--set", "workload.top_k=200", "--out", t.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!t.exists());
}
