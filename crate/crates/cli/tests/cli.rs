use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lytnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lytnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lytnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: &str, seed: &str, size: &str) -> std::path::PathBuf {
    ok(&["synth", "--count", count, "--seed", seed, "--size", size, "--out", s(dir)]);
    dir.join("manifest.jsonl")
}

const SMALL_NET: [&str; 4] = ["--alpha", "0.25", "--input-size", "64x64"];

fn train(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--epochs", "2", "--no-augment"];
    args.extend(SMALL_NET);
    args.extend(extra);
    ok(&args);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth(a.path(), "40", "7", "64x64");
    let mb = synth(b.path(), "40", "7", "64x64");
    let ta = fs::read_to_string(ma).unwrap();
    assert_eq!(ta.lines().count(), 40);
    assert_eq!(ta, fs::read_to_string(mb).unwrap());
    let first = fs::read_dir(a.path().join("images")).unwrap().count();
    assert_eq!(first, 40);
}

#[test]
fn missing_manifest_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lytnet(&[
        "train",
        "--manifest",
        s(&dir.path().join("absent.jsonl")),
        "--out",
        s(&dir.path().join("w.lytw")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "3", "1", "64x64");
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("{\"image\": 5}\n");
    fs::write(&m, text).unwrap();
    let out = lytnet(&["train", "--manifest", s(&m), "--out", s(&dir.path().join("w.lytw"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('4') || err.contains('3'), "{err}");
}

#[test]
fn training_is_reproducible_and_inference_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("data"), "10", "3", "64x64");
    let (wa, wb) = (dir.path().join("a.lytw"), dir.path().join("b.lytw"));
    train(&m, &wa, &["--seed", "4"]);
    train(&m, &wb, &["--seed", "4"]);
    assert_eq!(fs::read(&wa).unwrap(), fs::read(&wb).unwrap());
    let log = fs::read_to_string(wa.with_extension("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    let images: Vec<String> = (0..3)
        .map(|i| s(&dir.path().join(format!("data/images/{i:05}.png"))).to_string())
        .collect();
    for i in &images {
        assert!(Path::new(i).exists(), "{i}");
    }
    let mut args = vec!["infer", "--weights", s(&wa)];
    args.extend(SMALL_NET);
    args.extend(images.iter().map(String::as_str));
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, path) in lines.iter().zip(&images) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["path"].as_str().unwrap(), path);
        let sum: f64 = v["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{sum}");
        for k in ["x1", "y1", "x2", "y2"] {
            assert!(v[k].as_f64().unwrap().is_finite());
        }
    }

    let mut args = vec!["eval", "--manifest", s(&m), "--weights", s(&wa), "--format", "json"];
    args.extend(SMALL_NET);
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["all"]["count"].as_u64(), Some(10));
}

#[test]
fn corrupt_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "1", "0", "64x64");
    let w = dir.path().join("bad.lytw");
    fs::write(&w, b"NOPE0000").unwrap();
    let img = m.parent().unwrap().join("images/00000.png");
    let mut args = vec!["infer", "--weights", s(&w)];
    args.extend(SMALL_NET);
    args.push(s(&img));
    let out = lytnet(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad weights file"));
}

#[test]
fn unanimous_red_replay_announces_on_the_fifth_frame() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("frames.jsonl");
    let line = "{\"probs\":[1,0,0,0,0],\"x1\":0.5,\"y1\":0.72,\"x2\":0.5,\"y2\":0.48}\n";
    fs::write(&input, line.repeat(6)).unwrap();
    let out = ok(&["guide-replay", s(&input)]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for l in &lines[..4] {
        assert_eq!(l["light"], "uncertain");
        assert_eq!(l["announce"], false);
    }
    assert_eq!(lines[4]["light"], "red");
    assert_eq!(lines[4]["announce"], true);
    assert_eq!(lines[5]["announce"], false);
}

#[test]
fn transform_maps_the_calibration_point() {
    let out = ok(&["transform", "1671,1440", "2361,1440"]);
    let mut lines = out.lines();
    let (x, y) = lines.next().unwrap().split_once(',').unwrap();
    let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
    assert!((x - 1671.0).abs() < 0.5 && (y - 212.0).abs() < 0.5, "{x},{y}");
    assert!(lines.nth(1).unwrap().starts_with("dtheta"));

    let back = ok(&["transform", "--inverse", &format!("{x},{y}")]);
    let (bx, by) = back.trim().split_once(',').unwrap();
    assert!((bx.parse::<f64>().unwrap() - 1671.0).abs() < 0.01);
    assert!((by.parse::<f64>().unwrap() - 1440.0).abs() < 0.01);

    let bad = lytnet(&["transform", "1,2,3"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_text_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let rec = |p: &str, a: &str| {
        format!(
            "{{\"predicted\":\"{p}\",\"actual\":\"{a}\",\"predicted_endpoints\":{{\"x1\":0.5,\"y1\":0.9,\"x2\":0.5,\"y2\":0.5}},\"actual_endpoints\":{{\"x1\":0.5,\"y1\":0.9,\"x2\":0.6,\"y2\":0.5}},\"obstructed\":false}}\n"
        )
    };
    let text = [rec("red", "red"), rec("red", "green"), rec("green", "green"), rec("none", "none")].concat();
    fs::write(&records, text).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--records", s(&records), "--format", "json"])).unwrap();
    assert_eq!(json["all"]["accuracy"].as_f64(), Some(0.75));
    let text = ok(&["eval", "--records", s(&records)]);
    assert!(text.contains("75.00"), "{text}");
    let bad = lytnet(&["eval", "--records", s(&records), "--format", "yaml"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_reports_every_default_width() {
    let out = ok(&["bench", "--input-size", "64x64", "--runs", "1", "--format", "json"]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    let alphas: Vec<f64> = rows.iter().map(|r| r["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, [1.4, 1.25, 1.0, 0.9375, 0.875, 0.75, 0.5]);
    let flops: Vec<u64> = rows.iter().map(|r| r["flops"].as_u64().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[0] > w[1]), "{flops:?}");
    let text = ok(&["bench", "--input-size", "64x64", "--runs", "1", "--widths", "1.0,0.5"]);
    assert_eq!(text.lines().count(), 3);
    assert_eq!(lytnet(&["bench", "--widths=0"]).status.code(), Some(1));
}
