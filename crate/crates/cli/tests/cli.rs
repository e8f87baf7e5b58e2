use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gazechair_core::cnn::TrainHistory;
use gazechair_core::control::{Command as Drive, Telemetry};
use gazechair_core::evaluation::{LatencyStats, MetricsReport};
use tempfile::TempDir;
use walk::files_under;

const SMALL_TRAIN: &str = r#"{
  "seed": 3,
  "cnn": {
    "arch": {"input_size": 16, "input_channels": 3, "kernel": 3, "conv1_filters": 4, "pool1": 2,
             "conv2_filters": 4, "hidden": 8, "outputs": 4},
    "config": {"initial_rate": 0.01, "max_iterations": 6}
  }
}"#;

mod walk {
    use std::path::{Path, PathBuf};

    pub fn files_under(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }
}

fn gazechair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazechair")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gazechair(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &TempDir, users: usize, per_class: usize) -> PathBuf {
    let root = dir.path().join("corpus");
    ok(&["synth-gen", "--users", &users.to_string(), "--frames-per-class", &per_class.to_string(), "--out", s(&root)]);
    root
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_gen_writes_one_png_per_frame_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let root = corpus(&dir, 1, 1);
    let files = files_under(&root);
    let pngs: Vec<_> = files.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(pngs.len(), 4, "{files:?}");

    let again = dir.path().join("again");
    ok(&["synth-gen", "--users", "1", "--frames-per-class", "1", "--out", s(&again)]);
    let a: Vec<_> = files.iter().map(|p| (p.strip_prefix(&root).unwrap().to_owned(), fs::read(p).unwrap())).collect();
    let b: Vec<_> = files_under(&again)
        .iter()
        .map(|p| (p.strip_prefix(&again).unwrap().to_owned(), fs::read(p).unwrap()))
        .collect();
    assert_eq!(a, b);

    let other = dir.path().join("other");
    ok(&["synth-gen", "--users", "1", "--frames-per-class", "1", "--out", s(&other), "--seed", "5"]);
    assert_ne!(files_under(&other).iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>(),
        a.into_iter().map(|(_, d)| d).collect::<Vec<_>>());
}

#[test]
fn missing_corpus_is_an_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere");
    let out = gazechair(&["train", "--corpus", s(&missing), "--out", s(&dir.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let out = gazechair(&["eval", "--corpus", s(&missing), "--report", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn train_writes_model_and_bounded_history() {
    let dir = TempDir::new().unwrap();
    let root = corpus(&dir, 1, 6);
    let cfg = write(&dir, "train.json", SMALL_TRAIN);
    let model = dir.path().join("models/m.json");
    ok(&["train", "--corpus", s(&root), "--out", s(&model), "--config", s(&cfg)]);
    assert!(model.is_file());
    let history: TrainHistory = serde_json::from_str(&fs::read_to_string(dir.path().join("models/m.history.json")).unwrap()).unwrap();
    assert!(!history.records.is_empty() && history.records.len() <= 6);

    let templates = dir.path().join("tm");
    ok(&["train", "--corpus", s(&root), "--out", s(&templates), "--kind", "whole-template"]);
    assert!(templates.is_dir());
}

fn reports(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    files_under(dir).into_iter().filter(|p| s(p).ends_with(suffix)).collect()
}

#[test]
fn eval_cross_validates_and_writes_reports() {
    let dir = TempDir::new().unwrap();
    let root = corpus(&dir, 2, 10);
    let cfg = write(&dir, "train.json", SMALL_TRAIN);
    let out = dir.path().join("reports");
    let stdout = ok(&["eval", "--corpus", s(&root), "--cv", "5", "--report", s(&out), "--config", s(&cfg)]);
    assert!(stdout.contains("over 5 folds"), "{stdout}");
    let json = reports(&out, ".json");
    assert_eq!(json.len(), 3);
    assert_eq!(reports(&out, ".csv").len(), 3);
    let all: MetricsReport = serde_json::from_str(&fs::read_to_string(json.iter().find(|p| s(p).contains("report_all_")).unwrap()).unwrap()).unwrap();
    assert_eq!(all.fold_accuracies.len(), 10);
    assert_eq!(all.confusion.total(), 80);
    for (col, sum) in (0..4).map(|c| (c, (0..4).map(|r| all.normalized[r][c]).sum::<f64>())) {
        assert!((sum - 100.0).abs() < 1e-9, "column {col} sums to {sum}");
    }
    let csv = fs::read_to_string(reports(&out, ".csv").into_iter().next().unwrap()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "predicted,Right,Forward,Left,Closed");
    assert_eq!(csv.lines().count(), 5);

    let holdout = dir.path().join("holdout");
    let stdout = ok(&["eval", "--corpus", s(&root), "--cv", "1", "--kind", "whole-template", "--report", s(&holdout)]);
    assert!(stdout.contains("over 1 folds"), "{stdout}");
    let user: MetricsReport = serde_json::from_str(&fs::read_to_string(reports(&holdout, ".json").into_iter().find(|p| !s(p).contains("_all_")).unwrap()).unwrap()).unwrap();
    assert_eq!(user.confusion.total(), 8);
}

#[test]
fn bench_reports_consistent_latency() {
    let dir = TempDir::new().unwrap();
    let root = corpus(&dir, 1, 2);
    let cfg = write(&dir, "train.json", SMALL_TRAIN);
    let model = dir.path().join("m.json");
    ok(&["train", "--corpus", s(&root), "--out", s(&model), "--config", s(&cfg)]);
    let out = dir.path().join("bench.json");
    ok(&["bench", "--model", s(&model), "--samples", "50", "--warmup", "5", "--out", s(&out)]);
    let stats: LatencyStats = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(stats.samples, 50);
    assert!(stats.median_ms > 0.0 && stats.median_ms <= stats.p95_ms);
    assert!((stats.fps * stats.mean_ms / 1000.0 - 1.0).abs() < 1e-9);
}

fn simulate(dir: &TempDir, config: &str, script: &str) -> Vec<Telemetry> {
    let cfg = write(dir, "session.json", config);
    let script = write(dir, "script.jsonl", script);
    let out = dir.path().join("out/telemetry.jsonl");
    ok(&["simulate", "--headless", "--config", s(&cfg), "--script", s(&script), "--out", s(&out)]);
    fs::read_to_string(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn simulate_ten_forward_events() {
    let dir = TempDir::new().unwrap();
    let t = simulate(&dir, r#"{"engaged": true}"#, "{\"type\":\"gaze\",\"left\":\"Forward\",\"right\":\"Forward\",\"repeat\":10}\n");
    assert_eq!(t.len(), 10);
    assert_eq!(t[9].command, Drive::Forward);
    assert!(t[..9].iter().all(|r| r.command == Drive::Stop));
}

#[test]
fn simulate_obstacle_forces_emergency_stop() {
    let dir = TempDir::new().unwrap();
    write(&dir, "world.json", r#"{"obstacles":[{"type":"circle","center":[2.0,0.0],"radius":0.3}]}"#);
    let t = simulate(
        &dir,
        r#"{"engaged": true, "world": "world.json"}"#,
        "{\"type\":\"gaze\",\"left\":\"Forward\",\"right\":\"Forward\",\"repeat\":150}\n",
    );
    let hit = t.iter().position(|r| r.emergency_stop).expect("obstacle reached");
    assert!(t[hit..].iter().all(|r| r.command == Drive::Stop));
    assert!(t.iter().all(|r| r.pose.x < 1.7));
}

#[test]
fn simulate_empty_script_has_no_ticks() {
    let dir = TempDir::new().unwrap();
    assert!(simulate(&dir, "{}", "").is_empty());
    let missing = gazechair(&["simulate", "--config", s(&dir.path().join("session.json")), "--script", "x", "--out", "y"]);
    assert!(!missing.status.success(), "--headless is required");
}

#[test]
fn calibrate_synthetic_user_end_to_end() {
    let dir = TempDir::new().unwrap();
    let calib = write(
        &dir,
        "calib.json",
        r#"{"rounds": 2, "frames_per_round": 5, "keep": 8, "train_per_class": 6,
            "scenarios": [{"lighting": "indoor", "glasses": "nominal"}]}"#,
    );
    let cfg = write(&dir, "train.json", SMALL_TRAIN);
    let model = dir.path().join("user.json");
    let stdout = ok(&[
        "calibrate", "--source", "synthetic", "--out", s(&model), "--calib-config", s(&calib), "--config", s(&cfg),
        "--blink-rate", "0.1",
    ]);
    assert!(stdout.contains("held-out accuracy"), "{stdout}");
    assert!(model.is_file());
    let session = dir.path().join("user.session");
    assert!(session.join("session.json").is_file());
    let pngs = |sub: &str| files_under(&session.join(sub)).iter().filter(|p| s(p).ends_with(".png")).count();
    assert_eq!(pngs("train"), 24);
    assert_eq!(pngs("test"), 8);
}
