use std::path::Path;
use std::process::{Command, Output};

fn fedgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgraph")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{
  "schema_version": 1,
  "fed": { "num_clients": 3, "rounds": 3, "dp": { "noise_multiplier": 0.0 } },
  "graph": { "num_nodes": 150 }
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn last_accuracy(metrics: &Path) -> f64 {
    let text = std::fs::read_to_string(metrics).unwrap();
    text.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap()
}

#[test]
fn gen_writes_ten_clients_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = fedgraph(&["gen", "--seed", "5", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut files: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files.len(), 11);
    assert_eq!(files[10], "manifest.json");
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_config_is_a_config_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = fedgraph(&["gen", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn invalid_combinations_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fedgraph(&["train", "--config", &cfg, "--backend", "masked", "--robust", "norm_filter"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fedgraph(&["train", "--backend", "ckks"]).status.code(), Some(1));
    assert_eq!(fedgraph(&["recipe", "fig9", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(fedgraph(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedgraph(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_single_round_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = fedgraph(&["train", "--config", &cfg, "--rounds", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(out.join("model.ckpt").exists());

    let o = fedgraph(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("accuracy.svg").exists() && out.join("loss.svg").exists());
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedgraph(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no run outputs"));
}

#[test]
fn masked_and_plain_training_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut acc = vec![];
    for backend in ["plain", "masked"] {
        let out = tmp.path().join(backend);
        let o = fedgraph(&["train", "--config", &cfg, "--seed", "3", "--backend", backend, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        acc.push(last_accuracy(&out.join("metrics.csv")));
    }
    assert!((acc[0] - acc[1]).abs() <= 0.01, "{acc:?}");
}

#[test]
fn noise_sweep_writes_one_row_per_level() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = fedgraph(&["sweep", "noise", "--config", &cfg, "--rounds", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("noise_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(fedgraph(&["report", out.to_str().unwrap()]).status.success());
    assert!(out.join("noise_sweep.svg").exists());
}
