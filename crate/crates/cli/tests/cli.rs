use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mneme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mneme")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = mneme(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SYNTH: &str = r#"{"num_stories": 4, "sections": 3, "sentences_per_section": 3, "sentence_len": 8,
  "min_entities": 2, "max_entities": 3, "min_span": 0, "max_span": 2, "seed": 5}"#;

const TRAIN: &str = r#"{"variant": "dynamic", "num_layers": 1, "self_heads": 2, "cross_heads": 2,
  "hidden_dim": 8, "memory_dim": 8, "ffn_dim": 16, "seq_len": 24, "cache_size": 24, "chunk_size": 12,
  "rel_buckets": 8, "rel_max_distance": 32, "steps": 3, "batch_size": 2, "seed": 9}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("synth.json"), SYNTH).unwrap();
        fs::write(root.join("train.json"), TRAIN).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn corpus(&self) -> PathBuf {
        let out = self.path("corpus.jsonl");
        if !out.exists() {
            ok(&["synth", "--config", p(&self.path("synth.json")), "--out", p(&out)]);
        }
        out
    }

    fn checkpoint(&self) -> PathBuf {
        let out = self.path("model.ckpt");
        if !out.exists() {
            let corpus = self.corpus();
            ok(&["train", "--config", p(&self.path("train.json")), "--corpus", p(&corpus), "--out", p(&out)]);
        }
        out
    }
}

#[test]
fn synth_writes_corpus_and_truth() {
    let ws = Workspace::new();
    let corpus = ws.corpus();
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 4);
    let truth: Value = serde_json::from_str(&fs::read_to_string(ws.path("corpus.truth.json")).unwrap()).unwrap();
    assert_eq!(truth.as_array().unwrap().len(), 4);
}

#[test]
fn train_generate_analyze_round_trip() {
    let ws = Workspace::new();
    let ckpt = ws.checkpoint();
    let trace = fs::read_to_string(ws.path("model.loss.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,nll,kl,total"));
    assert_eq!(trace.lines().count(), 4);

    let samples = ws.path("samples.jsonl");
    let gen = |out: &Path| {
        ok(&[
            "generate", "--checkpoint", p(&ckpt), "--prompts", p(&ws.corpus()), "--out", p(out),
            "--samples", "2", "--max-tokens", "15", "--seed", "3",
        ])
    };
    gen(&samples);
    let again = ws.path("again.jsonl");
    gen(&again);
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text, fs::read_to_string(&again).unwrap());
    assert_eq!(text.lines().count(), 8);

    let report = ws.path("report.json");
    ok(&[
        "analyze", "--stories", p(&samples), "--gold", p(&ws.corpus()), "--out", p(&report),
        "--sections", "3", "--checkpoint", p(&ckpt),
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["stories"].as_array().unwrap().len(), 8);
    assert!(ws.path("report.csv").exists());
    assert!(ws.path("report.sections.csv").exists());
}

#[test]
fn analyze_annotated_corpus_without_model() {
    let ws = Workspace::new();
    let report = ws.path("gold.json");
    ok(&["analyze", "--stories", p(&ws.corpus()), "--out", p(&report), "--sections", "3"]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let first = &v["stories"][0];
    assert!(first["coherence"].is_number());
    assert!(first["perplexity"].is_null());
}

#[test]
fn eval_and_degradation_from_checkpoints() {
    let ws = Workspace::new();
    let ckpt = ws.checkpoint();
    let eval = ws.path("eval.json");
    ok(&["eval-lm", "--checkpoint", p(&ckpt), "--corpus", p(&ws.corpus()), "--out", p(&eval), "--sections", "3"]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&eval).unwrap()).unwrap();
    assert!(v["perplexity"].as_f64().unwrap() > 1.0);

    let dir = ws.path("deg");
    ok(&[
        "degradation", "--checkpoint", p(&ckpt), "--corpus", p(&ws.corpus()), "--cache-size", "24",
        "--cache-size", "4", "--sections", "3", "--out", p(&dir), "--chart",
    ]);
    for f in ["report.json", "degradation.csv", "summary.csv", "points.csv", "token_nll.csv", "chart.svg"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let ws = Workspace::new();
    let corpus = ws.corpus();
    let out = ws.path("x.ckpt");

    fs::write(ws.path("bad.json"), r#"{"hidden_dim": 8, "warp_factor": 9}"#).unwrap();
    let r = mneme(&["train", "--config", p(&ws.path("bad.json")), "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("warp_factor"));

    fs::write(ws.path("odd.json"), r#"{"hidden_dim": 8, "self_heads": 3}"#).unwrap();
    let r = mneme(&["train", "--config", p(&ws.path("odd.json")), "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let r = mneme(&["train", "--config", p(&ws.path("train.json")), "--corpus", p(&ws.path("none.jsonl")), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));

    fs::write(ws.path("broken.jsonl"), "{not json\n").unwrap();
    let r = mneme(&["analyze", "--stories", p(&ws.path("broken.jsonl")), "--out", p(&ws.path("r.json"))]);
    assert_eq!(r.status.code(), Some(3));

    let r = mneme(&["train", "--corpus", p(&corpus)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}
