//! HTTP API for live counterfactual active learning sessions, where a human
//! picks the feature to probe each round and either labels the generated
//! batch or lets a ground-truth model label it.
//!
//! ```text
//! POST /api/session                  create, train round 0
//! POST /api/session/{id}/feature     {"feature"} -> counterfactual batch
//! POST /api/session/{id}/labels      {"batch_id","labels"} -> retrain
//! GET  /api/session/{id}/state
//! GET  /api/session/{id}/curves
//! GET  /api/health
//! ```

pub mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use session::{Action, LabelerConfig, Session, SessionConfig, Snapshot, Store};

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "CAL_AUDIT_PORT";

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn invalid_config(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_config", message.to_string())
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

/// Server settings read from the `serve` config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: Option<String>,
    pub port: Option<u16>,
    /// Directory for session snapshots; sessions are memory-only without it.
    pub data_dir: Option<PathBuf>,
    /// Allowed dashboard origins; any origin when empty.
    pub cors_origins: Vec<String>,
}

/// `--port` beats the environment, which beats the config file.
pub fn resolve_port(flag: Option<u16>, env: Option<&str>, config: Option<u16>) -> Result<u16, String> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(v) = env.filter(|v| !v.is_empty()) {
        return v.parse().map_err(|_| format!("{PORT_ENV}={v} is not a valid port"));
    }
    Ok(config.unwrap_or(DEFAULT_PORT))
}

type Shared = Arc<Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Shared>>>,
    store: Option<Store>,
}

impl AppState {
    pub fn in_memory() -> Self {
        AppState {
            sessions: Default::default(),
            store: None,
        }
    }

    /// Open a snapshot directory and rebuild every session in it.
    pub fn with_store(dir: impl Into<PathBuf>) -> Result<Self, String> {
        let dir = dir.into();
        let store = Store::open(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let mut sessions = HashMap::new();
        for snap in store.load_all().map_err(|e| format!("{}: {e}", dir.display()))? {
            let id = snap.session_id.clone();
            let s = Session::restore(snap).map_err(|e| format!("restoring session {id}: {}", e.message))?;
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        Ok(AppState {
            sessions: Arc::new(RwLock::new(sessions)),
            store: Some(store),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map lock").len()
    }

    fn get(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    fn persist(&self, s: &Session) -> Result<(), ApiError> {
        match &self.store {
            Some(store) => store.save(&s.snapshot()).map_err(ApiError::internal),
            None => Ok(()),
        }
    }
}

/// Run `f` on the session under its lock, off the async workers.
async fn with_session<T, F>(app: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &AppState) -> Result<T, ApiError> + Send + 'static,
{
    let shared = app.get(id)?;
    let app = app.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = shared.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(&mut s, &app)
    })
    .await
    .map_err(ApiError::internal)?
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let config: SessionConfig = serde_json::from_slice(&body).map_err(ApiError::invalid_config)?;
    let start = Instant::now();
    let app2 = app.clone();
    let out = tokio::task::spawn_blocking(move || {
        let id = uuid::Uuid::new_v4().to_string();
        let s = Session::create(id.clone(), config)?;
        app2.persist(&s)?;
        let out = json!({
            "session_id": id,
            "round": 0,
            "influences": s.state.influences().features,
            "reference_influences": s.reference.as_ref().map(|r| &r.features),
            "features": s.state.training_set().schema().names().collect::<Vec<_>>(),
            "metrics": s.metrics(),
            "elapsed_ms": session::elapsed_ms(start),
        });
        app2.sessions
            .write()
            .expect("session map lock")
            .insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok::<_, ApiError>(out)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct FeatureRequest {
    feature: String,
}

async fn select_feature(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    app.get(&id)?;
    let req: FeatureRequest = parse_body(&body)?;
    with_session(&app, &id, move |s, app| {
        let start = Instant::now();
        let batch_id = s.next_batch_id();
        s.open_batch(batch_id.clone(), &req.feature)?;
        let mut out = s.batch_json();
        if let Some(labels) = s.synthetic_labels() {
            s.resolve(&batch_id, labels.clone())?;
            out["labels"] = json!(labels);
        }
        out["round"] = json!(s.state.round());
        out["elapsed_ms"] = json!(session::elapsed_ms(start));
        app.persist(s)?;
        Ok(Json(out))
    })
    .await
}

#[derive(Deserialize)]
struct LabelsRequest {
    batch_id: String,
    labels: Vec<u8>,
}

async fn submit_labels(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    app.get(&id)?;
    let req: LabelsRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::unprocessable("invalid_labels", e.to_string()))?;
    with_session(&app, &id, move |s, app| {
        let start = Instant::now();
        s.resolve(&req.batch_id, req.labels)?;
        app.persist(s)?;
        Ok(Json(json!({
            "round": s.state.round(),
            "influences": s.state.influences().features,
            "metrics": s.metrics(),
            "elapsed_ms": session::elapsed_ms(start),
        })))
    })
    .await
}

async fn get_state(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_session(&app, &id, |s, _| Ok(Json(s.state_json()))).await
}

async fn get_curves(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_session(&app, &id, |s, _| Ok(Json(json!(s.curves())))).await
}

fn cors(origins: &[String]) -> Result<CorsLayer, String> {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers(Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin `{o}`")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(values)))
}

pub fn router(app: AppState, cors_origins: &[String]) -> Result<Router, String> {
    Ok(Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/feature", post(select_feature))
        .route("/api/session/{id}/labels", post(submit_labels))
        .route("/api/session/{id}/state", get(get_state))
        .route("/api/session/{id}/curves", get(get_curves))
        .layer(cors(cors_origins)?)
        .with_state(app))
}

/// Serve until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
