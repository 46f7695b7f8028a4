use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[train]\nsteps = 2\nbatch = 1\n\n[data]\nn_train = 4\nn_test = 2\n";

fn sptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptseg")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny config, generated data and one trained run under `root`.
fn trained(root: &Path) {
    fs::write(root.join("cfg.toml"), TINY).unwrap();
    let out = sptseg(&["gen-data", "--config", p(&root.join("cfg.toml")), "--out", p(&root.join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = sptseg(&[
        "train",
        "--config",
        p(&root.join("cfg.toml")),
        "--data",
        p(&root.join("data")),
        "--out",
        p(&root.join("run")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let out = sptseg(&["gen-data", "--config", p(&dir.path().join("bad.toml")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn missing_data_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    let out = sptseg(&[
        "train",
        "--config",
        p(&dir.path().join("cfg.toml")),
        "--data",
        p(&dir.path().join("absent")),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_usage_exits_with_config_code() {
    assert_eq!(sptseg(&["train", "--ablate", "spt=maybe"]).status.code(), Some(2));
    assert_eq!(sptseg(&["verify", "--suite", "everything"]).status.code(), Some(2));
}

#[test]
fn manifest_lists_both_class_sets() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    let out = sptseg(&["gen-data", "--config", p(&dir.path().join("cfg.toml")), "--out", p(dir.path())]);
    assert!(out.status.success());
    let m = fs::read_to_string(dir.path().join("train/manifest.txt")).unwrap();
    let mut lines = m.lines();
    assert_eq!(lines.next(), Some("seen 0,1,2,3,4,5"));
    assert_eq!(lines.next(), Some("unseen 6,7"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn train_eval_and_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    trained(root);
    let loss = fs::read_to_string(root.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,focal,ssim,total"));
    assert_eq!(loss.lines().count(), 3);

    let ckpt = root.join("run/checkpoint.bin");
    let eval = |report: &str| {
        sptseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&root.join("data")), "--report", p(&root.join(report))])
    };
    let first = eval("a.txt");
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(eval("b.txt").status.success());
    let report = fs::read_to_string(root.join("a.txt")).unwrap();
    assert_eq!(report, fs::read_to_string(root.join("b.txt")).unwrap());
    let keys: Vec<&str> = report.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["pAcc", "mIoU_seen", "mIoU_unseen", "hIoU"]);

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    assert_eq!(eval("c.txt").status.code(), Some(5));
}

#[test]
fn spt_ablation_stores_no_filters() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    trained(root);
    let out = sptseg(&[
        "train",
        "--config",
        p(&root.join("cfg.toml")),
        "--data",
        p(&root.join("data")),
        "--out",
        p(&root.join("nospt")),
        "--ablate",
        "spt=off",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (store, cfg) = sptseg::checkpoint::read_checkpoint(&root.join("nospt/checkpoint.bin")).unwrap();
    assert!(cfg.encoder.spt_range.is_empty());
    assert!(store.names().all(|n| !n.starts_with("encoder.spt")));
}

#[test]
fn verify_fft_suite_passes() {
    let out = sptseg(&["verify", "--suite", "fft"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| !l.trim().is_empty()).all(|l| l.starts_with("PASS")), "{text}");
}
