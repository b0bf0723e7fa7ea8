//! Live annotation service.
//!
//! Exposes the pending query batch over HTTP, takes labels one at a time and
//! retrains only when an operator advances the round. Accepted labels are
//! journaled before they are acknowledged and the whole engine is
//! snapshotted after every round advance and every `snapshot_every` labels,
//! so a restart never loses an acknowledged label.

pub mod journal;
pub mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use actune_core::error::ActuneError;
use actune_core::Config;
use axum::extract::{Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};

pub use store::{Handle, LabelRequest, RoundState, Store};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] ActuneError),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

/// An error response: status code plus a JSON body with a machine-readable
/// `error` code.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub extra: Map<String, Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_in_batch", message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "class_out_of_range",
            message,
        )
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn gone(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::GONE, code, message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "snapshot_failed", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn unauthorized() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token",
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = self.extra;
        body.insert("schema_version".into(), SCHEMA_VERSION.into());
        body.insert("error".into(), self.code.into());
        body.insert("message".into(), self.message.into());
        (self.status, Json(Value::Object(body))).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    handle: Handle,
    token: Option<String>,
}

#[derive(Deserialize)]
struct TaskQuery {
    limit: Option<usize>,
}

/// All routes. `/health` is open; everything else needs the bearer token
/// when one is configured.
pub fn router(handle: Handle, token: Option<String>) -> Router {
    let state = AppState { handle, token };
    let protected = Router::new()
        .route("/round", get(get_round))
        .route("/tasks", get(get_tasks))
        .route("/labels", post(post_label))
        .route("/round/advance", post(post_advance))
        .route("/metrics", get(get_metrics))
        .route("/classes", get(get_classes))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

async fn health() -> Json<Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "status": "ok" }))
}

async fn get_round(State(s): State<AppState>) -> Result<Json<store::RoundStatus>, ApiError> {
    Ok(Json(s.handle.call(|st| st.round_status()).await?))
}

async fn get_tasks(
    State(s): State<AppState>,
    Query(q): Query<TaskQuery>,
) -> Result<Json<store::TaskList>, ApiError> {
    Ok(Json(s.handle.call(move |st| st.tasks(q.limit)).await?))
}

async fn post_label(
    State(s): State<AppState>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<store::LabelAck>, ApiError> {
    Ok(Json(s.handle.call(move |st| st.submit(req)).await??))
}

async fn post_advance(State(s): State<AppState>) -> Result<Json<store::AdvanceAck>, ApiError> {
    Ok(Json(s.handle.call(|st| st.advance()).await??))
}

async fn get_metrics(State(s): State<AppState>) -> Result<Json<store::Metrics>, ApiError> {
    Ok(Json(s.handle.call(|st| st.metrics()).await?))
}

async fn get_classes(State(s): State<AppState>) -> Result<Json<store::Classes>, ApiError> {
    Ok(Json(s.handle.call(|st| st.classes()).await?))
}

/// Opens the store, binds `bind` and serves until Ctrl-C. The bound address
/// is printed as `listening on <addr>` once the socket is ready.
pub async fn serve(config: Config, snapshot_dir: &Path, bind: &str) -> Result<(), ServiceError> {
    let dir = snapshot_dir.to_path_buf();
    let cfg = config.clone();
    let store = tokio::task::spawn_blocking(move || Store::open(&cfg, &dir))
        .await
        .map_err(|e| ServiceError::Io(snapshot_dir.to_path_buf(), std::io::Error::other(e)))??;
    let handle = Handle::spawn(store);
    let app = router(handle, config.service.token.clone());
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(bind), e))?;
    let addr: SocketAddr = listener
        .local_addr()
        .map_err(|e| ServiceError::Io(PathBuf::from(bind), e))?;
    println!("listening on {addr}");
    log::info!("serving on {addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(bind), e))
}
