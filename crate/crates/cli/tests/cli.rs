use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use actune_core::metrics::read_metrics_jsonl;
use serde_json::Value;

fn actune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic experiment: 3 rounds of 12 queries over 150 samples.
fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(
        &p,
        r#"
[experiment]
T = 3
b = 36
init_labeled = 12
K = 8
M = 3
k_st = 10
seed = 4

[classifier]
epochs = 60

[data.synthetic]
classes = 3
per_class = 50
dim = 5
test_per_class = 20
"#,
    )
    .unwrap();
    p
}

fn simulate(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--config", path(config), "--out", path(out)];
    args.extend_from_slice(extra);
    actune(&args)
}

#[test]
fn help_for_every_subcommand() {
    for sub in [
        "simulate",
        "serve",
        "inspect-regions",
        "export-metrics",
        "make-synthetic",
    ] {
        let out = actune(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = simulate(&cfg, &dir.path().join("o"), &["--strategy", "bald"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(actune(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&dir.path().join("missing.toml"), &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nT = 2\nb = 10\nM = 9\nK = 3\n").unwrap();
    let out = simulate(&bad, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = actune(&[
        "inspect-regions",
        "--snapshot",
        path(&dir.path().join("none.snap")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = simulate(&cfg, &out_dir, &["--export-clusters"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 rounds"));

    let records = read_metrics_jsonl(&out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(
        records.iter().map(|r| r.t).collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
    assert_eq!(records[3].labeled_total, 12 + 36);

    let timings = std::fs::read_to_string(out_dir.join("timings.jsonl")).unwrap();
    assert_eq!(timings.lines().count(), 4);
    let audit = std::fs::read_to_string(out_dir.join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 3);
    for line in audit.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["query_indices"].as_array().unwrap().len(), 12);
    }
    let csv = std::fs::read_to_string(out_dir.join("accuracy.csv")).unwrap();
    assert!(csv.starts_with("t,test_accuracy"));
    assert_eq!(csv.lines().count(), 5);
    for t in 1..=3 {
        let clusters =
            std::fs::read_to_string(out_dir.join(format!("clusters/round_{t}.csv"))).unwrap();
        assert!(clusters.starts_with("index,cluster,weight"));
    }
    assert!(out_dir.join("final.snap").exists());
}

#[test]
fn baselines_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for strategy in ["random", "top-entropy", "top-cal"] {
        let out = simulate(&cfg, &dir.path().join(strategy), &["--strategy", strategy]);
        assert!(
            out.status.success(),
            "{strategy}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.starts_with(strategy), "{stdout}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert!(simulate(&cfg, &a, &[]).status.success());
    assert!(simulate(&cfg, &b, &["--seed", "4"]).status.success());
    assert!(simulate(&cfg, &c, &["--seed", "5"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn inspect_and_export_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    assert!(simulate(&cfg, &out_dir, &[]).status.success());
    let snap = out_dir.join("final.snap");

    let out = actune(&["inspect-regions", "--snapshot", path(&snap)]);
    assert!(out.status.success());
    let report = String::from_utf8(out.stdout).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("id,size,U,I,u_k,queried"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty() && rows.len() <= 8);
    let queried: usize = rows.iter().map(|r| r[5].parse::<usize>().unwrap()).sum();
    assert_eq!(queried, 12);

    let out = actune(&["export-metrics", "--snapshot", path(&snap)]);
    assert!(out.status.success());
    assert_eq!(
        out.stdout,
        std::fs::read(out_dir.join("metrics.jsonl")).unwrap()
    );

    let csv_path = dir.path().join("acc.csv");
    let out = actune(&[
        "export-metrics",
        "--snapshot",
        path(&snap),
        "--format",
        "csv",
        "--out",
        path(&csv_path),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&csv_path).unwrap(),
        std::fs::read(out_dir.join("accuracy.csv")).unwrap()
    );
}

#[test]
fn make_synthetic_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = actune(&[
        "make-synthetic",
        "--out",
        path(&data),
        "--classes",
        "3",
        "--per-class",
        "40",
        "--dim",
        "4",
        "--test-per-class",
        "10",
        "--seed",
        "9",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "pool.afv",
        "labels.csv",
        "test.afv",
        "test_labels.csv",
        "config.toml",
    ] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    // Shrink the generated experiment so it fits the 120-sample pool.
    let generated = std::fs::read_to_string(data.join("config.toml")).unwrap();
    let mut doc: toml::Table = generated.parse().unwrap();
    let exp = doc["experiment"].as_table_mut().unwrap();
    for (k, v) in [
        ("T", 2),
        ("b", 20),
        ("init_labeled", 10),
        ("K", 6),
        ("M", 2),
        ("k_st", 8),
    ] {
        exp.insert(k.into(), toml::Value::Integer(v));
    }
    std::fs::write(data.join("config.toml"), toml::to_string(&doc).unwrap()).unwrap();

    let run = dir.path().join("run");
    let out = simulate(&data.join("config.toml"), &run, &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let records = read_metrics_jsonl(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[2].test_accuracy.unwrap() > 0.5);
}
