use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cal_core::cal::{run_cal, CalConfig, ScriptedLabeler, ScriptedOracle};
use cal_core::data::load_csv;
use cal_core::data::FeatureSchema;
use cal_core::models::{train, ModelKind, ModelSpec};
use cal_service::{resolve_port, router, AppState};

const SCHEMA: &str = r#"{"features":[{"name":"a","kind":"numeric"},{"name":"b","kind":"numeric"},
{"name":"c","kind":"categorical","categories":["x","y","z"]}],"target":"y","positive_label":"1"}"#;

fn write_fixture(dir: &Path) {
    let mut csv = String::from("a,b,c,y\n");
    for i in 0..24 {
        let a = i % 2;
        let b = (i / 2) % 2;
        let c = ["x", "y", "z"][i % 3];
        let y = u8::from(a == 1 || (b == 1 && c == "z"));
        csv.push_str(&format!("{a},{b},{c},{y}\n"));
    }
    std::fs::write(dir.join("d.csv"), csv).unwrap();
    std::fs::write(dir.join("d.json"), SCHEMA).unwrap();
    let schema = FeatureSchema::load(dir.join("d.json")).unwrap();
    let d = load_csv(dir.join("d.csv"), &schema).unwrap();
    let h_t = train(&d, &ModelSpec::new(ModelKind::Linear), 1).unwrap().predictor;
    h_t.save(dir.join("h_t.json")).unwrap();
}

fn tree_spec() -> Value {
    json!({"kind": "tree", "hyperparams": {"tree": {"max_depth": 4, "min_leaf": 1, "criterion": "gini"}}})
}

fn config(dir: &Path, synthetic: bool, evaluation: bool) -> Value {
    let data = json!({"source": "csv", "data": dir.join("d.csv"), "schema": dir.join("d.json")});
    let mut c = json!({
        "data": data,
        "batch_size": 5,
        "model": tree_spec(),
        "estimator": {"mode": "exact"},
        "seed": 7,
        "labeler": if synthetic {
            json!({"mode": "synthetic", "model": dir.join("h_t.json")})
        } else {
            json!({"mode": "human"})
        },
    });
    if evaluation {
        c["evaluation"] = json!({"in_dist": data, "out_dist": data});
        if !synthetic {
            c["reference_model"] = json!(dir.join("h_t.json"));
        }
    }
    c
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

fn app() -> Router {
    router(AppState::in_memory(), &[]).unwrap()
}

async fn create(app: &Router, cfg: Value) -> String {
    let (s, v) = call(app, "POST", "/api/session", Some(cfg)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_is_ok() {
    let (s, v) = call(&app(), "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn create_session_returns_round_zero_influences() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let (s, v) = call(&app, "POST", "/api/session", Some(config(dir.path(), false, false))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["round"], 0);
    let infl = v["influences"].as_object().unwrap();
    assert_eq!(infl.keys().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    assert!(v["reference_influences"].is_null());

    let (s, v) = call(&app, "POST", "/api/session", Some(config(dir.path(), true, false))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["reference_influences"].as_object().unwrap().len(), 3);
}

#[tokio::test]
async fn create_session_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    std::fs::write(dir.path().join("bad.json"), r#"{"features": [], "target": "y"}"#).unwrap();
    let mut c = config(dir.path(), false, false);
    c["data"]["schema"] = json!(dir.path().join("bad.json"));
    let (s, v) = call(&app, "POST", "/api/session", Some(c)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "dataset_error");
    assert!(v["message"].is_string());

    let mut c = config(dir.path(), false, false);
    c["batch_size"] = json!(0);
    let (s, v) = call(&app, "POST", "/api/session", Some(c)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_config");

    let (s, _) = call(&app, "POST", "/api/session", Some(json!({"nonsense": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn human_mode_pending_batch_rules() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), false, false)).await;

    let (s, _) = call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/session/missing/feature", Some(json!({"feature": "a"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b1", "labels": [0]}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, batch) = call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "c"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(batch["batch_id"], "b1");
    assert!(batch.get("labels").is_none());
    let rows = batch["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    // Each row equals its base row except possibly at the probed feature.
    let schema = FeatureSchema::load(dir.path().join("d.json")).unwrap();
    let d = load_csv(dir.path().join("d.csv"), &schema).unwrap();
    for (row, prov) in rows.iter().zip(batch["provenance"].as_array().unwrap()) {
        let base = d.row(prov["base_row"].as_u64().unwrap() as usize);
        assert_eq!(row["a"].as_f64().unwrap(), base[0]);
        assert_eq!(row["b"].as_f64().unwrap(), base[1]);
        assert_eq!(row["c"], prov["substituted_value"]);
    }

    let (s, v) = call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "a"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");

    let (s, _) = call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b1", "labels": [0, 1]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b9", "labels": vec![0; 5]}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (_, before) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;
    assert_eq!(before["round"], 0);
    assert_eq!(before["pending_batch"]["size"], 5);
    let (s, v) = call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b1", "labels": [1, 0, 1, 0, 1]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["round"], 1);
    let (_, after) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;
    assert_eq!(after["round"], 1);
    assert!(after["pending_batch"].is_null());
    assert_eq!(after["history"].as_array().unwrap().len(), 1);
    assert_eq!(after["train_size"], 29);
    assert_eq!(after["influences"], v["influences"]);
}

#[tokio::test]
async fn fresh_session_state_and_unknown_id() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let (_, created) = call(&app, "POST", "/api/session", Some(config(dir.path(), false, false))).await;
    let id = created["session_id"].as_str().unwrap();
    let (s, st) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(st["round"], 0);
    assert!(st["pending_batch"].is_null());
    assert_eq!(st["influences"].to_string(), created["influences"].to_string());
    let (s, v) = call(&app, "GET", "/api/session/nope/state", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
    let (_, curves) = call(&app, "GET", &format!("/api/session/{id}/curves"), None).await;
    assert_eq!(curves["influence_mse"]["mean"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn synthetic_mode_advances_and_curves_grow() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), true, true)).await;
    let (_, c0) = call(&app, "GET", &format!("/api/session/{id}/curves"), None).await;
    for m in ["influence_mse", "in_dist_error", "out_dist_error"] {
        assert_eq!(c0[m]["mean"].as_array().unwrap().len(), 1);
    }
    for round in 1..=3 {
        let (s, v) = call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "b"}))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["round"], round);
        assert_eq!(v["labels"].as_array().unwrap().len(), 5);
        let (_, c) = call(&app, "GET", &format!("/api/session/{id}/curves"), None).await;
        assert_eq!(c["out_dist_error"]["mean"].as_array().unwrap().len(), round + 1);
    }
}

#[tokio::test]
async fn human_mode_with_reference_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), false, true)).await;
    call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "a"}))).await;
    let (_, v) = call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b1", "labels": vec![0; 5]}))).await;
    assert!(v["metrics"]["influence_mse"].is_number());
    let (_, c) = call(&app, "GET", &format!("/api/session/{id}/curves"), None).await;
    assert_eq!(c["influence_mse"]["mean"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn all_zero_labels_drive_appended_rows_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), false, false)).await;
    let mut appended: Vec<Value> = Vec::new();
    for r in 1..=6 {
        let (_, batch) = call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "a"}))).await;
        appended.extend(batch["rows"].as_array().unwrap().iter().cloned());
        let (s, _) = call(
            &app,
            "POST",
            &format!("/api/session/{id}/labels"),
            Some(json!({"batch_id": format!("b{r}"), "labels": vec![0; 5]})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    // Replay offline to get the final model and check it on the appended rows.
    let (_, st) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;
    let (model, _) = replay(dir.path(), &st);
    let schema = FeatureSchema::load(dir.path().join("d.json")).unwrap();
    let mut wrong = 0;
    for row in &appended {
        let x: Vec<f64> = schema
            .features()
            .iter()
            .enumerate()
            .map(|(i, f)| match &row[&f.name] {
                Value::String(s) => schema.encode_value(i, s).unwrap(),
                v => v.as_f64().unwrap(),
            })
            .collect();
        wrong += model.predict(&x).unwrap() as usize;
    }
    assert!(wrong * 10 <= appended.len(), "{wrong} of {} appended rows predicted 1", appended.len());
}

fn replay(dir: &Path, state: &Value) -> (cal_core::models::Predictor, cal_core::cal::RunLog) {
    let schema = FeatureSchema::load(dir.join("d.json")).unwrap();
    let d = load_csv(dir.join("d.csv"), &schema).unwrap();
    let history = state["history"].as_array().unwrap();
    let features: Vec<String> = history.iter().map(|a| a["feature"].as_str().unwrap().to_string()).collect();
    let labels: Vec<Vec<u8>> = history
        .iter()
        .map(|a| a["labels"].as_array().unwrap().iter().map(|y| y.as_u64().unwrap() as u8).collect())
        .collect();
    let cfg = CalConfig {
        batch_size: 5,
        max_epochs: history.len(),
        convergence_tol: None,
        model: serde_json::from_value(tree_spec()).unwrap(),
        estimator: serde_json::from_value(json!({"mode": "exact"})).unwrap(),
        seed: 7,
    };
    run_cal(d, &mut ScriptedLabeler::new(labels), &mut ScriptedOracle::new(features), &cfg).unwrap()
}

#[tokio::test]
async fn offline_replay_reproduces_influences() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), false, true)).await;
    let script = [("a", [1, 1, 0, 0, 1]), ("c", [0, 0, 0, 1, 1]), ("b", [1, 0, 1, 0, 1])];
    for (r, (f, labels)) in script.iter().enumerate() {
        call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": f}))).await;
        let (s, _) = call(
            &app,
            "POST",
            &format!("/api/session/{id}/labels"),
            Some(json!({"batch_id": format!("b{}", r + 1), "labels": labels})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, st) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;
    let (_, log) = replay(dir.path(), &st);
    assert_eq!(log.rounds.len(), 4);
    let offline = serde_json::to_value(&log.rounds.last().unwrap().influences.features).unwrap();
    assert_eq!(offline.to_string(), st["influences"].to_string());
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let store = dir.path().join("sessions");
    let app = router(AppState::with_store(&store).unwrap(), &[]).unwrap();
    let id = create(&app, config(dir.path(), false, true)).await;
    call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "a"}))).await;
    call(&app, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b1", "labels": [1, 0, 0, 1, 1]}))).await;
    call(&app, "POST", &format!("/api/session/{id}/feature"), Some(json!({"feature": "c"}))).await;
    let (_, before) = call(&app, "GET", &format!("/api/session/{id}/state"), None).await;

    let restored = AppState::with_store(&store).unwrap();
    assert_eq!(restored.session_count(), 1);
    let app2 = router(restored, &[]).unwrap();
    let (_, after) = call(&app2, "GET", &format!("/api/session/{id}/state"), None).await;
    assert_eq!(before, after);
    let csv_before = std::fs::read(dir.path().join("d.csv")).unwrap();
    let (s, _) = call(&app2, "POST", &format!("/api/session/{id}/labels"), Some(json!({"batch_id": "b2", "labels": vec![0; 5]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(csv_before, std::fs::read(dir.path().join("d.csv")).unwrap());
}

#[tokio::test]
async fn concurrent_feature_requests_serialize() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let app = app();
    let id = create(&app, config(dir.path(), false, false)).await;
    let uri = format!("/api/session/{id}/feature");
    let (a, b) = tokio::join!(
        call(&app, "POST", &uri, Some(json!({"feature": "a"}))),
        call(&app, "POST", &uri, Some(json!({"feature": "b"})))
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
}

#[tokio::test]
async fn cors_preflight_allows_dashboard() {
    let app = router(AppState::in_memory(), &["http://localhost:5173".to_string()]).unwrap();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/session")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
}

#[test]
fn port_precedence() {
    assert_eq!(resolve_port(Some(1), Some("2"), Some(3)), Ok(1));
    assert_eq!(resolve_port(None, Some("2"), Some(3)), Ok(2));
    assert_eq!(resolve_port(None, None, Some(3)), Ok(3));
    assert_eq!(resolve_port(None, None, None), Ok(8080));
    assert!(resolve_port(None, Some("http"), None).is_err());
}
