use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const HEADER: &str = "t,spread,residual,kkt_residual,obs_spread,obs_residual,cost_gap";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boxeki"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, body).unwrap();
    path
}

fn small_linear(extra_problem: &str, max_steps: usize) -> String {
    format!(
        r#"{{
  "problem": {{ "kind": "linear_elliptic" {extra_problem} }},
  "method": {{ "ensemble_size": 5, "seed": 2, "methods": ["eki", "projected", "transformed"] }},
  "integration": {{ "t_end": 5.0, "checkpoints": 10, "max_steps": {max_steps} }}
}}"#
    )
}

#[test]
fn bundled_configs_carry_the_experiment_settings() {
    for (name, k) in [("linear_full.cfg", 16), ("linear_lowobs.cfg", 15)] {
        let text = fs::read_to_string(configs_dir().join(name)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["method"]["ensemble_size"], 5);
        assert_eq!(v["problem"]["noise_std"], 0.01);
        assert_eq!(v["problem"]["observations"], k);
        assert_eq!(v["integration"]["t_end"], 1e6);
        assert_eq!(v["flow"]["schedule"]["alpha"], 0.75);
        assert_eq!(v["flow"]["schedule"]["r"], 1.0);
    }
}

#[test]
fn short_run_writes_csvs_summary_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_linear("", 1_000_000));
    let out = dir.path().join("out");
    let o = run(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("\"problem\""));
    assert!(stdout.contains("\"t_end\": 5.0"));
    for m in ["eki", "projected", "transformed"] {
        let csv = fs::read_to_string(out.join(format!("{m}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HEADER));
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 11);
        assert!(rows[1].split(',').all(|f| f.contains('e')), "{}", rows[1]);
    }
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"transformed_beats_projected\""));
    assert!(summary.contains("\"failed\": false"));
    assert!(out.join("config.json").exists());
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_linear("", 1_000_000));
    let out = dir.path().join("o");
    let o = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--methods",
        "eki",
        "--seed",
        "9",
        "--t-end",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("eki.csv").exists());
    assert!(!out.join("projected.csv").exists());
    let resolved = fs::read_to_string(out.join("config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 9"));
    assert!(resolved.contains("\"t_end\": 0.5"));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_linear("", 1_000_000));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(0));
    }
    for name in ["eki.csv", "projected.csv", "transformed.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn empty_interval_is_a_validation_error_naming_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let bounds = r#", "params": 4, "elements": 8, "observations": 4, "lower": [0, 0, 0, 2], "upper": [1, 1, 1, 1]"#;
    let cfg = write_config(dir.path(), &small_linear(bounds, 1_000_000));
    let o = run(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("component 3"), "{err}");
}

#[test]
fn unknown_method_and_missing_file_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_linear("", 1_000_000));
    let o = run(&["run", cfg.to_str().unwrap(), "--methods", "eki,ekf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("ekf"));
    let o = run(&["run", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_with_three_and_flags_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_linear("", 20));
    let out = dir.path().join("o");
    let o = run(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"failed\": true"));
    assert!(summary.contains("\"partial\": true"));
    let csv = fs::read_to_string(out.join("transformed.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}
