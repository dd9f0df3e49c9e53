use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cal-audit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        ok(&["synth", "--kind", "arrests", "--rows", "300", "--seed", "2", "--out", &f.p("d.csv"), "--schema", &f.p("s.json")]);
        ok(&["train", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--kind", "linear", "--out", &f.p("h.json")]);
        f
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn audit_prints_every_feature() {
    let f = Fixture::new();
    let out = ok(&["audit", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--model", &f.p("h.json"), "--estimator", "exact"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(f.path("s.json")).unwrap()).unwrap();
    let feats = v["features"].as_object().unwrap();
    assert_eq!(feats.len(), schema["features"].as_array().unwrap().len());
    assert!(feats.values().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));

    let trained = ok(&["audit", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--train", "tree", "--estimator", "mc", "--draws", "500"]);
    assert!(serde_json::from_str::<Value>(&trained).unwrap()["features"].is_object());
}

#[test]
fn input_errors_exit_2_with_empty_stdout() {
    let f = Fixture::new();
    let missing = run(&["audit", "--data", &f.p("nope.csv"), "--schema", &f.p("s.json"), "--model", &f.p("h.json")]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(missing.stdout.is_empty());
    assert_eq!(code(&["audit", "--data", &f.p("d.csv"), "--schema", &f.p("s.json")]), 2);
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(
        code(&["theory", "--check", "thm1", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--model", &f.p("h.json"), "--auto-theta", "--trials", "0"]),
        2
    );
    assert_eq!(code(&["cal", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--model", &f.p("h.json")]), 2);
    std::fs::write(f.path("bad.json"), r#"{"k": 5, "colour": 1}"#).unwrap();
    assert_eq!(code(&["cal", "--config", &f.p("bad.json"), "--seed", "1"]), 2);
    std::fs::write(f.path("exp.json"), json!({"setting": "guided", "data": {"source": "synthetic", "kind": "arrests", "rows": 100, "seed": 0}}).to_string()).unwrap();
    assert_eq!(code(&["experiment", "--config", &f.p("exp.json"), "--out", &f.p("o")]), 2);
}

#[test]
fn theorem_checks_hold() {
    let f = Fixture::new();
    ok(&["train", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--kind", "tree", "--out", &f.p("t.json")]);
    let all: Value = serde_json::from_str(&ok(&[
        "theory", "--check", "thm2", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--model", &f.p("h.json"), "--model2", &f.p("t.json"),
    ]))
    .unwrap();
    assert!(all.as_array().unwrap().iter().all(|c| c["holds"] == json!(true)));
    let one: Value = serde_json::from_str(&ok(&[
        "theory", "--check", "thm1", "--data", &f.p("d.csv"), "--schema", &f.p("s.json"), "--model", &f.p("t.json"),
        "--auto-theta", "--trials", "30", "--feature", "age",
    ]))
    .unwrap();
    assert_eq!(one["feature"], "age");
    assert_eq!(one["witness_high"]["within_epsilon"], json!(true));
}

#[test]
fn cal_streams_one_record_per_round() {
    let f = Fixture::new();
    let cfg = json!({"data": f.p("d.csv"), "schema": f.p("s.json"), "model": f.p("h.json"), "k": 10, "epochs": 3, "oracle": "guided"});
    std::fs::write(f.path("cal.json"), cfg.to_string()).unwrap();
    let out = ok(&["cal", "--config", &f.p("cal.json"), "--seed", "4"]);
    let rounds: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rounds.len(), 4);
    assert_eq!(rounds[0]["selected_feature"], Value::Null);
    assert_eq!(rounds[3]["train_size"].as_u64().unwrap(), rounds[0]["train_size"].as_u64().unwrap() + 30);

    let paths = ok(&["cal", "--config", &f.p("cal.json"), "--seed", "4", "--epochs", "1", "--out", &f.p("run")]);
    assert_eq!(paths.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(f.path("run/run.jsonl")).unwrap().lines().count(), 2);

    ok(&["synth", "--kind", "arrests", "--rows", "100", "--seed", "9", "--out", &f.p("pool.csv"), "--schema", &f.p("s2.json")]);
    let nc = ok(&["cal", "--config", &f.p("cal.json"), "--seed", "4", "--oracle", "non-counterfactual", "--pool", &f.p("pool.csv")]);
    assert_eq!(nc.lines().count(), 4);
}

#[test]
fn compare_reports_paired_deltas() {
    let f = Fixture::new();
    let cfg = json!({
        "data": {"source": "synthetic", "kind": "arrests", "rows": 300, "seed": 1},
        "model": {"kind": "tree"},
        "batch_size": 10, "epochs": 2, "runs": 2,
        "estimator": {"mode": "mc", "draws": 1000},
        "metric_estimator": {"mode": "mc", "draws": 1000},
        "seed": 3
    });
    std::fs::write(f.path("exp.json"), cfg.to_string()).unwrap();
    let out = ok(&["compare", "--config", &f.p("exp.json"), "--oracle", "guided,random", "--out", &f.p("cmp")]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["settings"].as_array().unwrap().len(), 2);
    assert!(!v["deltas"].as_array().unwrap().is_empty());
    for s in ["guided", "random"] {
        let csv = std::fs::read_to_string(f.root.join("cmp").join(s).join("curves.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "round,metric,mean,std");
    }
    assert!(f.root.join("cmp/comparison.json").exists());
}

#[test]
fn serve_on_a_taken_port_exits_2() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = Command::new(env!("CARGO_BIN_EXE_cal-audit"))
        .args(["serve", "--port", &port])
        .env_remove("CAL_AUDIT_PORT")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
