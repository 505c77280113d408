use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dynad(run_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynad"))
        .env("DYNAD_RUN_ROOT", run_root)
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--set", "data.resolution=64",
    "--set", "codec.model.kind=pool",
    "--set", "codec.model.factor=4",
    "--set", "data.synthetic.train=12",
    "--set", "data.synthetic.test_good=2",
    "--set", "dic.k=3",
];

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

#[test]
fn infer_before_train_names_the_missing_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let img = root.path().join("x.png");
    std::fs::write(&img, b"").unwrap();
    let mut args = vec!["infer", "--out", "o", img.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let err = error_of(&dynad(root.path(), &args));
    assert_eq!(err["error"], "missing_artifact");
    let path = err["path"].as_str().unwrap();
    assert!(path.starts_with(root.path().to_str().unwrap()), "{path}");
    assert!(path.ends_with("synthetic/denoiser.ckpt"), "{path}");
}

#[test]
fn inconsistent_config_is_rejected_before_any_work() {
    let root = tempfile::tempdir().unwrap();
    let out = dynad(root.path(), &["train", "--set", "dic.min_bin=11"]);
    let err = error_of(&out);
    assert_eq!(err["error"], "invalid_config");
    assert!(!root.path().join("default").exists());
}

#[test]
fn unknown_ablation_mode_fails() {
    let root = tempfile::tempdir().unwrap();
    let out = dynad(root.path(), &["ablate", "--mode", "sideways"]);
    assert!(!out.status.success());
}

#[test]
fn snapshot_becomes_the_default_config() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["--run-dir", "r1", "train-codec"];
    args.extend_from_slice(SMALL);
    let out = dynad(root.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap = root.path().join("r1/config.toml");
    let first = std::fs::read_to_string(&snap).unwrap();
    assert!(first.contains("resolution = 64"));
    assert!(root.path().join("r1/synthetic/codec.ckpt").exists());

    // no flags: the snapshot is read back and rewritten unchanged
    let out = dynad(root.path(), &["--run-dir", "r1", "train-codec"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&snap).unwrap(), first);
}

#[test]
fn gen_synthetic_writes_a_category_tree() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let mut args = vec!["gen-synthetic", "--out", data.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = dynad(root.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["train"], 12);
    let train = std::fs::read_dir(data.join("synthetic/train/good")).unwrap().count();
    assert_eq!(train, 12);
    assert!(data.join("synthetic/ground_truth/scratch").is_dir());
}
