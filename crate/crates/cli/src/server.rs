//! HTTP service over an atomically swappable model snapshot.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::api::{ApiError, ErrorKind, Snapshot};

/// Shared service state. Requests clone the current `Arc<Snapshot>` and
/// never observe a partially loaded model.
#[derive(Default)]
pub struct AppState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    model_dir: Mutex<Option<PathBuf>>,
}

impl AppState {
    pub fn empty() -> Arc<AppState> {
        Arc::new(AppState::default())
    }

    pub fn with_snapshot(snapshot: Snapshot, model_dir: Option<PathBuf>) -> Arc<AppState> {
        let state = AppState::default();
        state.install(snapshot);
        *state.model_dir.lock().expect("model dir lock") = model_dir;
        Arc::new(state)
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn install(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    pub fn set_model_dir(&self, dir: Option<PathBuf>) {
        *self.model_dir.lock().expect("model dir lock") = dir;
    }

    fn model_dir(&self) -> Option<PathBuf> {
        self.model_dir.lock().expect("model dir lock").clone()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.kind.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/model", get(model))
        .route("/v1/predict", post(predict))
        .route("/v1/whatif", post(whatif))
        .route("/admin/reload", post(reload))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

async fn access_log(request: Request, next: Next) -> Response {
    let method = request.method().clone();
    let path = request.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(request).await;
    info!(
        target: "connex::http",
        "method={method} path={path} status={} ms={:.2}",
        response.status().as_u16(),
        start.elapsed().as_secs_f64() * 1e3
    );
    response
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(ErrorKind::BadRequest, format!("invalid JSON: {e}")))
}

fn loaded(state: &AppState) -> Result<Arc<Snapshot>, ApiError> {
    state.current().ok_or_else(ApiError::unavailable)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let snapshot = state.current();
    Json(json!({
        "status": "ok",
        "model_loaded": snapshot.is_some(),
        "model_id": snapshot.as_ref().map(|s| s.info.model_id.clone()),
    }))
}

async fn model(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let snapshot = loaded(&state)?;
    Ok(Json(&snapshot.info).into_response())
}

/// Runs CPU-bound scoring off the async workers.
async fn compute<T, F>(snapshot: Arc<Snapshot>, f: F) -> Result<Json<T>, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Snapshot) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&snapshot))
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
        .map(Json)
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let snapshot = loaded(&state)?;
    let body = parse_body(&body)?;
    Ok(compute(snapshot, move |s| s.handle_predict(&body)).await?.into_response())
}

async fn whatif(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let snapshot = loaded(&state)?;
    let body = parse_body(&body)?;
    Ok(compute(snapshot, move |s| s.handle_whatif(&body)).await?.into_response())
}

/// Loads a bundle and swaps it in. The body may name a directory with
/// `{"model_dir": "..."}`; otherwise the configured directory is reloaded.
async fn reload(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let requested = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        match parse_body(&body)? {
            Value::Object(m) => match m.get("model_dir") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(PathBuf::from(s)),
                Some(_) => return Err(ApiError::field("model_dir", "`model_dir` must be a string")),
            },
            _ => return Err(ApiError::new(ErrorKind::BadRequest, "request body must be a JSON object")),
        }
    };
    let dir = requested
        .or_else(|| state.model_dir())
        .ok_or_else(|| ApiError::field("model_dir", "no model directory given or configured"))?;
    let load_dir = dir.clone();
    let snapshot = tokio::task::spawn_blocking(move || Snapshot::load(&load_dir))
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
        .map_err(|e| {
            warn!("reload from {} failed: {e}", dir.display());
            ApiError::field("model_dir", format!("cannot load {}: {e}", dir.display()))
        })?;
    let info = snapshot.info.clone();
    state.install(snapshot);
    state.set_model_dir(Some(dir.clone()));
    info!("loaded model {} ({}) from {}", info.model_id, info.stage, dir.display());
    Ok(Json(info).into_response())
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
