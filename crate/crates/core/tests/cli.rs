mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::tiny;
use repre::pipeline::train::MetricsRecord;

fn repre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repre")).args(args).output().expect("spawn repre")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let mut cfg = tiny(&dir.join("run"));
    cfg.steps = 4;
    let path = dir.join("config.txt");
    fs::write(&path, format!("{}{extra}", cfg.to_text())).unwrap();
    path.display().to_string()
}

fn metrics(path: &Path) -> Vec<MetricsRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn pretrain_dump_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let printed = ok(repre(&["pretrain", "--config", &config]));
    let run = dir.path().join("run");
    assert_eq!(printed.trim(), run.join("checkpoint.bin").display().to_string());
    let records = metrics(&run.join("metrics.jsonl"));
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);

    let ckpt = run.join("checkpoint.bin").display().to_string();
    let out = dir.path().join("dump");
    ok(repre(&["dump", "--checkpoint", &ckpt, "--out", out.to_str().unwrap(), "--images", "2"]));
    assert_eq!(fs::read_dir(out.join("attention")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(out.join("reconstruction")).unwrap().count(), 2);
    assert!(out.join("embeddings.csv").is_file());

    let data = dir.path().join("data");
    ok(repre(&["synth", "--out", data.to_str().unwrap(), "--train", "24", "--test", "12", "--image-size", "8"]));
    let report = ok(repre(&["probe", "--checkpoint", &ckpt, "--data", data.to_str().unwrap(), "--iterations", "10"]));
    let v: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    assert_eq!(v["test_images"], 12);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn resume_from_a_periodic_checkpoint_matches_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    let config = dir.path().join("config.txt").display().to_string();
    fs::write(&config, cfg.to_text()).unwrap();
    ok(repre(&["pretrain", "--config", &config]));
    let run = dir.path().join("run");
    let metrics_path = run.join("metrics.jsonl");
    let full = fs::read_to_string(&metrics_path).unwrap();
    assert!(run.join("checkpoint-000002.bin").is_file());

    // Keep the first two records, as if the run had died after step 2.
    let head: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(&metrics_path, head).unwrap();
    let ckpt = run.join("checkpoint-000002.bin");
    ok(repre(&["pretrain", "--config", &config, "--resume", ckpt.to_str().unwrap()]));

    let strip = |r: MetricsRecord| MetricsRecord { step_seconds: 0.0, ..r };
    let a: Vec<_> = full.lines().map(|l| strip(serde_json::from_str(l).unwrap())).collect();
    let b: Vec<_> = metrics(&metrics_path).into_iter().map(strip).collect();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "train.stpes = 3\n");
    let out = repre(&["pretrain", "--config", &config]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stpes"));
}

#[test]
fn corrupted_checkpoint_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    ok(repre(&["pretrain", "--config", &config]));
    let ckpt = dir.path().join("run").join("checkpoint.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let out = repre(&["dump", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn gradcheck_reports_every_entry() {
    let stdout = ok(repre(&["gradcheck", "--instances", "2"]));
    assert!(stdout.lines().count() >= 24);
    assert!(stdout.lines().all(|l| l.starts_with("ok")));
    assert!(stdout.contains("loss/info_nce"));
    assert!(stdout.contains("loss/combined"));
}

#[test]
fn ablate_taps_writes_comparable_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("ablate");
    let stdout = ok(repre(&["ablate", "--axis", "taps", "--config", &config, "--steps", "2", "--out", out.to_str().unwrap()]));
    assert_eq!(stdout.lines().count(), 2);
    for name in ["taps-1", "taps-4"] {
        let m = metrics(&out.join(format!("{name}.jsonl")));
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|r| r.l_reconstruct.is_some()));
    }
    assert!(out.join("summary.json").is_file());
    let bad = repre(&["ablate", "--axis", "depth", "--config", &config]);
    assert!(!bad.status.success());
}
