use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn framecap(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_framecap"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env("FRAMECAP_DATA_DIR", "data")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn report(root: &Path, command: &str) -> Value {
    let text = std::fs::read_to_string(root.join("data/reports").join(format!("{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn tiny_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    ok(&framecap(
        root,
        &["synth", "--tiny", "--n", "6", "--seed", "1", "--manifest", "videos.jsonl", "--out", "gt.jsonl", "--kind", "ground-truth"],
    ));
    ok(&framecap(root, &["synth", "--tiny", "--n", "12", "--seed", "2", "--kind", "image", "--out", "images.jsonl"]));
    let r = report(root, "synth");
    assert_eq!(r["status"], "ok");
    assert_eq!(r["seed"], 2);
    assert_eq!(r["metrics"]["clips"], 12);

    let stdout = ok(&framecap(
        root,
        &["pseudolabel", "--tiny", "--manifest", "videos.jsonl", "--clip-len", "2", "--workers", "2", "--seed", "3"],
    ));
    assert!(stdout.contains("0 failed"), "{stdout}");
    let r = report(root, "pseudolabel");
    assert_eq!(r["metrics"]["videos"], 6);
    let shard = root.join("data/shards/pseudo.jsonl");
    assert!(shard.exists());
    assert_eq!(r["artifacts"][0], shard.display().to_string());

    let stdout = ok(&framecap(
        root,
        &[
            "train", "--tiny", "--shard", "data/shards/pseudo.jsonl", "--shard", "images.jsonl", "--steps", "4", "--p-image", "0.5",
            "--image-batch", "4", "--video-batch", "2", "--workers", "2", "--checkpoint-every", "2", "--seed", "5",
        ],
    ));
    assert!(stdout.contains("trained to step 4"), "{stdout}");
    let r = report(root, "train");
    assert_eq!(r["metrics"]["steps"], 4);
    assert_eq!(r["config"]["p_image"], 0.5);
    assert!(r["wall_s"].as_f64().unwrap() >= 0.0);
    let ckpt = root.join("data/checkpoints/pretrain.fcap");
    assert!(ckpt.exists());
    assert!(root.join("data/checkpoints/pretrain.step2.fcap").exists());
    let log = std::fs::read_to_string(root.join("data/logs/pretrain.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // resume to a later step
    ok(&framecap(
        root,
        &[
            "train", "--shard", "data/shards/pseudo.jsonl", "--shard", "images.jsonl", "--steps", "6", "--resume",
            "data/checkpoints/pretrain.fcap", "--p-image", "0.5", "--image-batch", "4", "--video-batch", "2", "--seed", "5",
        ],
    ));
    assert_eq!(report(root, "train")["metrics"]["steps"], 6);

    let stdout = ok(&framecap(root, &["eval", "--checkpoint", "data/checkpoints/pretrain.fcap", "--shard", "gt.jsonl"]));
    assert!(stdout.contains("token_accuracy"));
    let r = report(root, "eval");
    let acc = r["metrics"]["token_accuracy"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r["metrics"]["cider_d"].as_f64().is_some());

    let stdout = ok(&framecap(
        root,
        &["generate", "--checkpoint", "data/checkpoints/pretrain.fcap", "--shard", "gt.jsonl", "--top-p", "0.9", "--limit", "3"],
    ));
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(report(root, "generate")["metrics"]["captions"].as_array().unwrap().len(), 3);
}

#[test]
fn bench_reports_reference_row() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&framecap(dir.path(), &["bench-attention"]));
    let row = stdout
        .lines()
        .find(|l| l.starts_with("separable") && l.contains(" 16  16  196   64"))
        .unwrap_or_else(|| panic!("{stdout}"));
    assert!(row.contains("14.79"), "{row}");
    assert!(stdout.lines().any(|l| l.contains("  1  196   64")));
    let r = report(dir.path(), "bench-attention");
    assert_eq!(r["metrics"]["rows"].as_array().unwrap().len(), 18);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("m.jsonl"), "").unwrap();
    let out = framecap(root, &["pseudolabel", "--manifest", "m.jsonl", "--top-p", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(root, "pseudolabel");
    assert_eq!(r["status"], "error");
    assert!(r["error"].as_str().unwrap().contains("top-p"));

    let out = framecap(root, &["experiment", "no-such-playbook"]);
    assert_eq!(out.status.code(), Some(2));

    let out = framecap(root, &["pseudolabel", "--manifest", "m.jsonl", "--backend", "remote"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("bad.jsonl"), "{\"video_id\": \"v\", \"duration_s\": -1}\n").unwrap();
    let out = framecap(root, &["pseudolabel", "--manifest", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(report(root, "pseudolabel")["error"].as_str().unwrap().contains("bad.jsonl"));

    let out = framecap(root, &["eval", "--checkpoint", "missing.fcap", "--shard", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&framecap(root, &["synth", "--tiny", "--n", "8", "--kind", "ground-truth", "--out", "gt.jsonl"]));
    let out = framecap(
        root,
        &["train", "--tiny", "--shard", "gt.jsonl", "--steps", "20", "--lr", "1e300", "--gate-init", "one", "--video-batch", "2"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(root, "train");
    assert_eq!(r["status"], "error");
    assert!(r["error"].as_str().unwrap().contains("diverge"), "{}", r["error"]);
}

#[test]
fn report_path_is_configurable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&framecap(root, &["--report", "out/r.json", "synth", "--tiny", "--n", "2"]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(root.join("out/r.json")).unwrap()).unwrap();
    assert_eq!(r["command"], "synth");
    assert_eq!(r["config"]["n"], 2);
    assert!(root.join("data/synth/pseudo-train-0.jsonl").exists());
}
