use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use knn_prompting::harness::synthetic::SyntheticSpec;
use knn_prompting::harness::write_dataset;

struct Fixture {
    dir: tempfile::TempDir,
    backend: String,
}

impl Fixture {
    fn new() -> Fixture {
        Fixture::with(SyntheticSpec {
            noise: 0.4,
            prefix_noise: 0.2,
            ..SyntheticSpec::default()
        })
    }

    fn with(spec: SyntheticSpec) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("mock.json"), serde_json::to_vec(&spec.mock_config()).unwrap()).unwrap();
        fs::write(p.join("task.json"), serde_json::to_vec(&spec.task()).unwrap()).unwrap();
        write_dataset(p.join("train.jsonl"), &spec.pool("train", 12)).unwrap();
        write_dataset(p.join("test.jsonl"), &spec.pool("test", 6)).unwrap();
        let backend = format!("mock://{}", p.join("mock.json").display());
        Fixture { dir, backend }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn knnp(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_knnp"))
            .current_dir(self.dir.path())
            .env("KNNP_BACKEND_URL", &self.backend)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.knnp(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn read_lines(path: &Path) -> Vec<Value> {
    json_lines(&fs::read_to_string(path).unwrap())
}

#[test]
fn saved_store_predicts_like_a_fresh_split() {
    let f = Fixture::new();
    let manifest = f.ok(&["build-store", "--task", "task.json", "--train", "train.jsonl", "--seed", "4", "--out", "stores/"]);
    assert_eq!(PathBuf::from(manifest.trim()), PathBuf::from("stores/synthetic.manifest.json"));
    assert!(f.path("stores/synthetic.keys.f32").exists());

    let from_store = f.ok(&["predict", "--task", "task.json", "--test", "test.jsonl", "--store", "stores/synthetic", "--seed", "4"]);
    let from_train = f.ok(&["predict", "--task", "task.json", "--test", "test.jsonl", "--train", "train.jsonl", "--seed", "4"]);
    let lines = json_lines(&from_store);
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|l| l["method"] == "knn" && l["record"]["neighbors"].as_array().unwrap().len() == 3));
    assert_eq!(from_store, from_train);
}

#[test]
fn predict_writes_every_method() {
    let f = Fixture::new();
    f.ok(&[
        "predict", "--task", "task.json", "--test", "test.jsonl", "--train", "train.jsonl",
        "--method", "icl,contextual-calibration", "--out", "preds/p.jsonl",
    ]);
    let lines = read_lines(&f.path("preds/p.jsonl"));
    assert_eq!(lines.len(), 24);
    assert_eq!(lines[0]["method"], lines[11]["method"]);
    assert_ne!(lines[0]["method"], lines[12]["method"]);
    assert!(lines.iter().all(|l| l["record"]["label_scores"].as_array().unwrap().len() == 2));
}

#[test]
fn predict_without_demonstrations_fails() {
    let f = Fixture::new();
    let out = f.knnp(&["predict", "--task", "task.json", "--test", "test.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn scaling_curve_then_fit() {
    let f = Fixture::with(SyntheticSpec {
        signal: 0.3,
        noise: 1.0,
        ..SyntheticSpec::default()
    });
    f.ok(&[
        "scaling-curve", "--task", "task.json", "--train", "train.jsonl", "--test", "test.jsonl",
        "--m", "2,4,8", "--seeds", "0,1", "--out", "scaling",
    ]);
    let csv = fs::read_to_string(f.path("scaling/scaling-knn.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(f.path("scaling/report.json").exists() && f.path("scaling/report.csv").exists());

    let fit: Value = serde_json::from_str(&f.ok(&["fit-powerlaw", "--input", "scaling/scaling-knn.csv"])).unwrap();
    assert_eq!(fit["points"], 3);
    let err = &fit["error"];
    assert!(err["alpha"].as_f64().unwrap() > 0.0 && err["beta"].is_f64());
}

#[test]
fn eval_writes_a_single_named_report() {
    let f = Fixture::new();
    f.ok(&[
        "eval", "--task", "task.json", "--train", "train.jsonl", "--test", "test.jsonl",
        "--m", "4", "--seeds", "0", "--out", "r.json",
    ]);
    let report: Value = serde_json::from_slice(&fs::read(f.path("r.json")).unwrap()).unwrap();
    assert!(report.is_array() || report.is_object());
    assert!(!f.path("report.csv").exists());
}

#[test]
fn export_repr_dumps_anchors_then_tests() {
    let f = Fixture::new();
    f.ok(&["build-store", "--task", "task.json", "--train", "train.jsonl", "--hidden", "--out", "s"]);
    f.ok(&["export-repr", "--task", "task.json", "--store", "s", "--test", "test.jsonl", "--hidden", "--out", "repr.jsonl"]);
    let lines = read_lines(&f.path("repr.jsonl"));
    let info: Value = serde_json::from_slice(&fs::read(f.path("mock.json")).unwrap()).unwrap();
    assert_eq!(lines.len(), 22 + 12);
    assert!(lines[..22].iter().all(|l| l["kind"] == "anchor"));
    assert!(lines[22..].iter().all(|l| l["kind"] == "test"));
    for l in &lines {
        let probs = l["probs"].as_array().unwrap();
        assert_eq!(probs.len() as u64, info["vocab_size"].as_u64().unwrap());
        assert!(l["hidden"].as_array().is_some_and(|h| !h.is_empty()));
    }
}

#[test]
fn max_shots_reports_a_budget() {
    let f = Fixture::new();
    let text = f.ok(&["max-shots", "--task", "task.json", "--train", "train.jsonl", "--limit", "60", "--trials", "20"]);
    let budget: Value = serde_json::from_str(&text).unwrap();
    let m = budget["max_shots"].as_u64().unwrap();
    assert!(m >= 1);
    assert!(budget["truncation_probability"].as_f64().unwrap() <= 0.05);
    let roomier: Value = serde_json::from_str(&f.ok(&[
        "max-shots", "--task", "task.json", "--train", "train.jsonl", "--limit", "200", "--trials", "20",
    ]))
    .unwrap();
    assert!(roomier["max_shots"].as_u64().unwrap() >= m);
}

#[test]
fn bad_backend_uri_fails() {
    let f = Fixture::new();
    for backend in ["ftp://nowhere", "mock://missing.json"] {
        let out = f.knnp(&[
            "eval", "--task", "task.json", "--train", "train.jsonl", "--test", "test.jsonl",
            "--backend", backend, "--out", "r",
        ]);
        assert!(!out.status.success(), "{backend}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    }
}
