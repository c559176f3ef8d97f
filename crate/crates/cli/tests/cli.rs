use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossseg")).args(args).env("RUST_LOG", "warn").output().expect("spawn crossseg")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {line}"))
        .parse()
        .unwrap()
}

fn gen(dir: &Path, n: &str, seed: &str) -> String {
    ok(&["gen", "--n", n, "--seed", seed, "--out", dir.to_str().unwrap()])
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.toml" {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "6", "3");
    gen(&b, "6", "3");
    gen(&c, "6", "4");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    let manifest = std::fs::read_to_string(a.join("run_manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"gen\""));
}

#[test]
fn usage_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");
    for args in [
        vec!["gen", "--n", "0", "--out", out.to_str().unwrap()],
        vec!["gen", "--n", "3", "--difficulty", "extreme", "--out", out.to_str().unwrap()],
        vec!["bench", "--refine-iters", "4"],
        vec!["bench", "--ablate", "plain", "--refine-iters", "2"],
        vec!["frobnicate"],
    ] {
        assert_eq!(run(&args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing");
    let out = run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty());
}

#[test]
fn fixtures_bound_the_metric() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "10", "0");
    let d = data.to_str().unwrap();
    let oracle = ok(&["eval", "--data", d, "--predictor", "oracle", "--direction", "both"]);
    assert_eq!(oracle.lines().count(), 2);
    for line in oracle.lines() {
        assert_eq!(field(line, "mean_iou"), 1.0);
    }
    let empty = ok(&["eval", "--data", d, "--predictor", "empty", "--split", "train"]);
    assert_eq!(field(&empty, "mean_iou"), 0.0);
}

#[test]
fn train_eval_infer_bench_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run_dir = t.path().join("run");
    gen(&data, "8", "1");
    let d = data.to_str().unwrap();
    let r = run_dir.to_str().unwrap();
    let common = ["--channels", "16", "--epochs", "1", "--batch-size", "2", "--refine-iters", "1"];
    let mut args = vec!["train", "--data", d, "--out", r];
    args.extend(common);
    let out = ok(&args);
    assert!(field(&out, "final_loss").is_finite());
    let ckpt = run_dir.join("final");
    assert!(ckpt.join("tensors.bin").exists());
    assert!(run_dir.join("metrics.log").exists());
    let manifest = std::fs::read_to_string(run_dir.join("run_manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"train\"") && manifest.contains("[config.model]"));

    let c = ckpt.to_str().unwrap();
    let first = ok(&["eval", "--checkpoint", c, "--data", d, "--split", "train"]);
    let second = ok(&["eval", "--checkpoint", c, "--data", d, "--split", "train"]);
    assert_eq!(first, second);
    let v = field(&first, "mean_iou");
    assert!((0.0..=1.0).contains(&v));

    let img = |split: &str, kind: &str, file: &str| data.join(kind).join(split).join(file).display().to_string();
    let inf = t.path().join("inf");
    let out = ok(&[
        "infer",
        "--checkpoint",
        c,
        "--source",
        &img("train", "images", "000000_s.png"),
        "--source-mask",
        &img("train", "masks", "000000_s.png"),
        "--target",
        &img("train", "images", "000000_t.png"),
        "--out",
        inf.to_str().unwrap(),
    ]);
    for f in ["mask.png", "overlay_source.png", "overlay_target.png"] {
        assert!(inf.join(f).exists(), "{f}");
    }
    assert!((0.0..=1.0).contains(&field(&out, "iou_vs_source")));

    let report = t.path().join("bench.txt");
    let out = ok(&["bench", "--checkpoint", c, "--warmup", "1", "--passes", "3", "--out", report.to_str().unwrap()]);
    assert!(field(&out, "mean_ms") > 0.0);
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 4);

    let bad = run(&["bench", "--checkpoint", c, "--channels", "32", "--passes", "1"]);
    assert_eq!(bad.status.code(), Some(1));
}
