use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn thmseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thmseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = thmseq(args);
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

/// A small three-modality corpus with its train/val split.
fn synth(dir: &Path, docs: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth", "--docs", docs, "--mean-len", "10", "--modalities", "text,vision,font", "--seed", "3", "--out", s(&data),
    ]);
    data
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "12");
    for f in ["corpus.jsonl", "train.jsonl", "val.jsonl", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    let manifest = read_json(&data.join("manifest.json"));
    assert_eq!(manifest["documents"]["all"], 12);
    assert_eq!(manifest["seed"], 3);
    let lines = fs::read_to_string(data.join("corpus.jsonl")).unwrap().lines().count();
    assert_eq!(manifest["paragraphs"], lines);
    let summary: Value = serde_json::from_str(&ok(&["ingest-check", "--corpus", s(&data.join("corpus.jsonl"))])).unwrap();
    assert_eq!(summary["paragraphs"], lines);
    assert_eq!(summary["documents"], 12);
}

#[test]
fn bad_usage_exits_one() {
    let out = thmseq(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = thmseq(&["synth", "--class-counts", "1,2,3"]);
    assert_eq!(out.status.code(), Some(1));
    let out = thmseq(&["eval", "--corpus", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let corpus = data.join("corpus.jsonl");
    let out = thmseq(&["train-font", "--corpus", s(&corpus), "--hidden", "8", "--emit-corpus", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4");
    let missing = dir.path().join("absent.ckpt");
    let out = thmseq(&["eval", "--checkpoint", s(&missing), "--corpus", s(&data.join("val.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}

#[test]
fn dummy_baseline_matches_class_proportions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--docs", "25", "--class-counts", "3145,1255,858,35", "--out", s(&data)]);
    let m: Value = serde_json::from_str(&ok(&[
        "eval",
        "--baseline",
        "dummy",
        "--corpus",
        s(&data.join("corpus.jsonl")),
    ]))
    .unwrap();
    let acc = 100.0 * m["accuracy"].as_f64().unwrap();
    let f1 = 100.0 * m["mean_f1"].as_f64().unwrap();
    assert!((acc - 59.41).abs() < 0.01, "{acc}");
    assert!((f1 - 24.85).abs() < 0.01, "{f1}");
}

#[test]
fn train_eval_predict_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "16");
    let (train, val) = (data.join("train.jsonl"), data.join("val.jsonl"));
    let runs = dir.path().join("runs");
    let common = ["--corpus", s(&train), "--val", s(&val), "--epochs", "2", "--seed", "1"];
    for (model, extra) in [("sw", vec!["--window", "4", "--heads", "2", "--model-dim", "16"]), ("crf", vec![]), ("para", vec!["--hidden", "8"])] {
        let out = runs.join(model);
        let mut args = vec!["train-seq", "--model", model, "--out", s(&out)];
        args.extend(common);
        args.extend(extra);
        ok(&args);
        for f in ["model.ckpt", "metrics.json", "run.json"] {
            assert!(out.join(f).is_file(), "{model}: {f} missing");
        }
    }
    let fusion = runs.join("gmu");
    let mut args = vec!["train-fusion", "--mechanism", "gmu", "--out", s(&fusion)];
    args.extend(common);
    ok(&args);
    ok(&["eval", "--baseline", "dummy", "--corpus", s(&val), "--out", s(&runs.join("dummy"))]);

    let ckpt = runs.join("sw/model.ckpt");
    let m: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&val)])).unwrap();
    assert_eq!(m, read_json(&runs.join("sw/metrics.json")));

    let lines = ok(&["predict", "--checkpoint", s(&ckpt), "--corpus", s(&val)]);
    let input = fs::read_to_string(&val).unwrap();
    assert_eq!(lines.lines().count(), input.lines().count());
    for (pred, rec) in lines.lines().zip(input.lines()) {
        let (pred, rec): (Value, Value) = (serde_json::from_str(pred).unwrap(), serde_json::from_str(rec).unwrap());
        assert_eq!(pred["doc_id"], rec["doc_id"]);
        assert_eq!(pred["para_index"], rec["para_index"]);
        assert!(["basic", "theorem", "proof", "overlap"].contains(&pred["label"].as_str().unwrap()));
    }

    let table = ok(&["report", "--runs", s(&runs)]);
    let header = table.lines().next().unwrap();
    assert!(header.contains("Per-paragraph") && header.contains("CRF") && header.contains("HAT"));
    for row in ["dummy", "font", "fusion:gmu"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "row {row} missing:\n{table}");
    }
    let font = table.lines().find(|l| l.starts_with("font ")).unwrap();
    assert!(font.split('|').skip(1).take(3).all(|c| c.contains('/')), "{font}");
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "10");
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train-seq", "--model", "crf", "--corpus", s(&data.join("corpus.jsonl")), "--epochs", "2", "--seed", "5",
            "--out", s(&out),
        ]);
        (fs::read(out.join("metrics.json")).unwrap(), fs::read(out.join("model.ckpt")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synth.json");
    fs::write(&config, r#"{"docs": 7, "mean_len": 5, "modalities": ["font"], "seed": 2}"#).unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--config", s(&config), "--out", s(&a)]);
    assert_eq!(read_json(&a.join("manifest.json"))["documents"]["all"], 7);
    let b = dir.path().join("b");
    ok(&["synth", "--config", s(&config), "--docs", "3", "--out", s(&b)]);
    let manifest = read_json(&b.join("manifest.json"));
    assert_eq!(manifest["documents"]["all"], 3);
    assert_eq!(manifest["seed"], 2);

    fs::write(&config, "[1, 2]").unwrap();
    assert_eq!(thmseq(&["synth", "--config", s(&config)]).status.code(), Some(1));
}
