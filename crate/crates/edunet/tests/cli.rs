//! Black-box checks of the `edunet` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edunet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn edunet")
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let r = run(&[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--n",
            "3",
            "--size",
            "32",
            "--seed",
            seed,
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same seed must reproduce bytes");
    assert_ne!(dir_bytes(&a), dir_bytes(&c), "different seed must differ");
}

#[test]
fn synth_zero_samples_yields_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let r = run(&["synth", "--out", out.to_str().unwrap(), "--n", "0"]);
    assert!(r.status.success());
    let n = std::fs::read_dir(out.join("images")).unwrap().count();
    assert_eq!(n, 0);
}

#[test]
fn conflicting_branch_flags_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let r = run(&["synth", "--out", data.to_str().unwrap(), "--n", "2", "--size", "32"]);
    assert!(r.status.success());
    let r = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--global-only",
        "--local-only",
    ]);
    assert!(!r.status.success());
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("--local-only") || msg.contains("--global-only"), "{msg}");
}

#[test]
fn missing_checkpoint_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let r = run(&["synth", "--out", data.to_str().unwrap(), "--n", "1", "--size", "32"]);
    assert!(r.status.success());
    let r = run(&[
        "eval",
        "--ckpt",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn unknown_config_key_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let r = run(&["synth", "--out", data.to_str().unwrap(), "--n", "2", "--size", "32"]);
    assert!(r.status.success());
    let r = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--set",
        "train.warp_factor=2",
    ]);
    assert_eq!(r.status.code(), Some(1), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn train_then_eval_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = dir.path().join("t");
    let r = run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "2",
        "--size",
        "32",
        "--seed",
        "5",
    ]);
    assert!(r.status.success());
    let r = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "folds=1",
        "--set",
        "train.max_epochs=2",
        "--set",
        "model.input_size=32",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists() && out.join("train_log.csv").exists() && out.join("resolved.cfg").exists());

    let csv = out.join("metrics.csv");
    let r = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--config",
        out.join("resolved.cfg").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("dataset,fold,class,dsc,sensitivity,tp,fn,fp"), "{body}");

    // inference twice on the same input must produce identical bytes
    let img = data.join("images").join("synth0000.png");
    let p1 = dir.path().join("p1.png");
    let p2 = dir.path().join("p2.png");
    for p in [&p1, &p2] {
        let r = run(&[
            "infer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
            "--out",
            p.to_str().unwrap(),
            "--heatmap",
            "local.dec3",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(p1.with_extension("heatmap.png").exists());
}

#[test]
fn gradcheck_subcommand_reports_ok() {
    let r = run(&["gradcheck", "--ops", "relu,softmax,dice_loss"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = String::from_utf8_lossy(&r.stdout);
    assert_eq!(out.matches(" ok ").count(), 3, "{out}");
}
