use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tryon_core::conditioning::VideoTensor;
use tryon_core::media;

fn tryon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tryon")).args(args).output().expect("spawn tryon")
}

fn ok(args: &[&str]) -> Output {
    let out = tryon(args);
    assert!(out.status.success(), "tryon {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n == "resolved_config.toml") {
                // the snapshot records the output directory itself
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn toy(dir: &Path, limit: usize) -> PathBuf {
    let out = dir.join("toy");
    ok(&["make-toy", "--out", s(&out), "--limit", &limit.to_string()]);
    out
}

#[test]
fn three_stub_clips_give_three_manifest_lines() {
    let d = tempfile::tempdir().unwrap();
    let toy = toy(d.path(), 3);
    let out = d.path().join("built");
    ok(&["build-dataset", "--input", s(&toy.join("sources.jsonl")), "--out", s(&out), "--seed", "4"]);
    let recs = lines(&out.join("manifest.jsonl"));
    assert_eq!(recs.len(), 3);
    for r in &recs {
        assert_eq!(r["mode"], "shop-pair");
        if r.get("rejected").is_none() {
            let human = r["paths"]["human"].as_str().unwrap();
            assert!(out.join(human).exists());
        }
    }
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn all_rejected_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let toy = toy(d.path(), 2);
    // shop-pair mode without catalog images rejects every clip
    let text = fs::read_to_string(toy.join("sources.jsonl")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["catalog"] = Value::Array(vec![]);
            format!("{v}\n")
        })
        .collect();
    let input = toy.join("no_catalog.jsonl");
    fs::write(&input, stripped).unwrap();
    let out = d.path().join("built");
    let r = tryon(&["build-dataset", "--input", s(&input), "--out", s(&out)]);
    assert!(!r.status.success());
    let recs = lines(&out.join("manifest.jsonl"));
    assert!(recs.iter().all(|r| r["rejected"] == true));
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let d = tempfile::tempdir().unwrap();
    let toy = toy(d.path(), 3);
    let input = toy.join("sources.jsonl");
    for name in ["a", "b"] {
        ok(&["--workers", "1", "build-dataset", "--input", s(&input), "--out", s(&d.path().join(name)), "--seed", "9"]);
    }
    ok(&["--workers", "1", "build-dataset", "--input", s(&input), "--out", s(&d.path().join("c")), "--seed", "10"]);
    let (a, b, c) = (tree(&d.path().join("a")), tree(&d.path().join("b")), tree(&d.path().join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);

    let bk = d.path().join("bk");
    ok(&["init", "--out", s(&bk), "--seed", "1"]);
    let run = d.path().join("run");
    ok(&[
        "train",
        "--manifest",
        s(&toy.join("manifest.jsonl")),
        "--backbone",
        s(&bk.join("backbone.ck")),
        "--out",
        s(&run),
        "--steps",
        "2",
        "--batch-size",
        "2",
    ]);
    let sample = toy.join("samples").join("toy-0-red");
    for name in ["g1", "g2"] {
        ok(&[
            "generate",
            "--checkpoint",
            s(&run.join("checkpoint.ck")),
            "--human",
            s(&sample.join("human.png")),
            "--garment",
            s(&sample.join("garment_0.png")),
            "--pose",
            s(&sample.join("pose.json")),
            "--steps",
            "3",
            "--seed",
            "5",
            "--out",
            s(&d.path().join(name)),
        ]);
    }
    let (g1, g2) = (tree(&d.path().join("g1")), tree(&d.path().join("g2")));
    assert!(g1.keys().any(|k| k.ends_with("index.json")));
    assert_eq!(g1, g2);
}

#[test]
fn missing_checkpoint_exits_with_config_code() {
    let d = tempfile::tempdir().unwrap();
    let r = tryon(&[
        "generate",
        "--checkpoint",
        s(&d.path().join("nope.ck")),
        "--human",
        "h.png",
        "--garment",
        "g.png",
        "--pose",
        "p.json",
        "--out",
        s(&d.path().join("o")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let last = String::from_utf8_lossy(&r.stderr).lines().last().unwrap_or("").to_string();
    let ev: Value = serde_json::from_str(&last).unwrap();
    assert_eq!(ev["event"], "error");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "out = \"x\"\nsede = 3\n").unwrap();
    assert_eq!(tryon(&["init", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn snapshot_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["init", "--out", s(&a), "--seed", "3"]);
    let b = d.path().join("b");
    ok(&["init", "--config", s(&a.join("resolved_config.toml")), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("backbone.ck")).unwrap(), fs::read(b.join("backbone.ck")).unwrap());
    // a snapshot from another command is refused
    let r = tryon(&["make-toy", "--config", s(&a.join("resolved_config.toml")), "--out", s(&d.path().join("t"))]);
    assert_eq!(r.status.code(), Some(2));
}

fn write_pairs(dir: &Path, pred_offset: f32) -> PathBuf {
    let mut entries = String::new();
    for (i, (method, dataset)) in [("Ours", "Internet"), ("Ours", "Internet"), ("Base", "Internet")].iter().enumerate() {
        let truth = tryon_core::toy::figure(i % 3, (i + 1) % 3).video();
        let shift = if *method == "Base" { pred_offset } else { 0.0 };
        let pred = VideoTensor::from_clamped(truth.tensor().map(|x| x + shift)).unwrap();
        media::write_raw(&dir.join(format!("truth_{i}.raw")), &truth).unwrap();
        media::write_raw(&dir.join(format!("pred_{i}.raw")), &pred).unwrap();
        entries.push_str(&format!(
            "{{\"id\":\"p{i}\",\"method\":\"{method}\",\"dataset\":\"{dataset}\",\"pred\":\"pred_{i}.raw\",\"truth\":\"truth_{i}.raw\"}}\n"
        ));
    }
    let p = dir.join("pairs.jsonl");
    fs::write(&p, entries).unwrap();
    p
}

#[test]
fn evaluate_identical_pairs_and_agreeing_renderings() {
    let d = tempfile::tempdir().unwrap();
    let pairs = write_pairs(d.path(), 0.1);
    let out = d.path().join("report");
    ok(&["evaluate", "--pairs", s(&pairs), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let txt = fs::read_to_string(out.join("report.txt")).unwrap();
    let rows = tryon_core::metrics::parse_report_csv(&csv).unwrap();
    let ours = rows.iter().find(|r| r.method == "Ours").unwrap();
    assert_eq!(ours.scores.l1, 0.0);
    assert!(ours.scores.fid.abs() < 1e-6);
    let base = rows.iter().find(|r| r.method == "Base").unwrap();
    assert!(base.scores.l1 > 0.0);

    let parsed = tryon_core::metrics::parse_report_txt(&txt);
    for r in &rows {
        let (_, vals) = parsed.iter().find(|(m, _)| *m == r.method).unwrap();
        for (v, x) in vals.iter().zip(r.scores.values()) {
            let v = v.expect("value printed");
            assert!((v - x).abs() <= 0.5e-2 * x.abs().max(1.0), "{} {v} vs {x}", r.method);
        }
    }
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
}
