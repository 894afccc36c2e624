use std::path::Path;
use std::process::{Command, Output};

fn fabimit(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fabimit"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("smoke.toml");
    let text = format!(
        r#"scenarios = ["box"]
trials = 3
master_seed = 1
{extra}

[paths]
dataset = "data/dataset.bin"
models = "models"
demos = "demos"
output = "runs"

[collect]
transitions = 500

[train]
min_records = 500
hidden = [64, 64]
registration_pairs = 2000
fine_tune_epochs = 5

[train.train]
epochs = 5

[episode.control]
n_samples = 100
elite_count = 10
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn smoke_pipeline_runs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let start = std::time::Instant::now();
    for args in [&["collect"][..], &["train"], &["record-demo"], &["imitate", "--scenario", "box"], &["evaluate"]] {
        assert_ok(&fabimit(&cfg, args));
    }
    let dataset = std::fs::read(dir.path().join("data/dataset.bin")).unwrap();
    let model = std::fs::read(dir.path().join("models/forward.net")).unwrap();
    let first = std::fs::read_to_string(dir.path().join("runs/summary-full.csv")).unwrap();

    assert_ok(&fabimit(&cfg, &["evaluate"]));
    assert_eq!(std::fs::read_to_string(dir.path().join("runs/summary-full.csv")).unwrap(), first);
    // evaluation only reads the dataset and models
    assert_eq!(std::fs::read(dir.path().join("data/dataset.bin")).unwrap(), dataset);
    assert_eq!(std::fs::read(dir.path().join("models/forward.net")).unwrap(), model);

    assert_ok(&fabimit(&cfg, &["ablate"]));
    let report = fabimit(&cfg, &["report"]);
    assert_ok(&report);
    let table = String::from_utf8(report.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["full", "no-mpc", "no-prior", "no-cost"]);
    assert!(table.lines().next().unwrap().contains("box Rate %"));
    assert!(start.elapsed().as_secs() < 300);

    for name in [
        "runs/summary-full.csv",
        "runs/summary-full.txt",
        "runs/chamfer-box-full.csv",
        "runs/box-full-trial0.telemetry.csv",
        "runs/report.csv",
        "models/loss_curves.csv",
    ] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("# config_hash="), "{name}");
    }
    let trace = std::fs::read_to_string(dir.path().join("runs/box-full-trial0.trace.jsonl")).unwrap();
    assert!(trace.lines().next().unwrap().contains("\"config_hash\""));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    // nothing collected yet
    assert_eq!(fabimit(&cfg, &["train"]).status.code(), Some(3));
    assert_eq!(fabimit(&cfg, &["evaluate"]).status.code(), Some(3));
    assert_eq!(fabimit(&dir.path().join("absent.toml"), &["collect"]).status.code(), Some(3));

    let mismatch = write_config(dir.path(), "seeds = [1, 2]");
    let out = fabimit(&mismatch, &["collect"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8(out.stderr).unwrap();
    assert_eq!(msg.trim().lines().count(), 1, "{msg}");
    assert!(msg.contains("seed list"));

    let typo = write_config(dir.path(), "trails = 3");
    assert_eq!(fabimit(&typo, &["collect"]).status.code(), Some(2));
}

#[test]
fn default_config_parses_back() {
    let out = Command::new(env!("CARGO_BIN_EXE_fabimit")).arg("default-config").output().unwrap();
    assert_ok(&out);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    std::fs::write(&path, out.stdout).unwrap();
    // parses and validates; the dataset does not exist yet
    assert_eq!(fabimit(&path, &["train"]).status.code(), Some(3));
}
