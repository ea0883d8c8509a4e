//! JSON-over-HTTP front end.
//!
//! | method | path                         | body                                  |
//! |--------|------------------------------|---------------------------------------|
//! | POST   | `/sessions`                  | `{seed?, initial_description?}`       |
//! | POST   | `/sessions/{id}/message`     | `{text}`                              |
//! | GET    | `/sessions/{id}/parameters`  |                                       |
//! | GET    | `/sessions/{id}/memory`      |                                       |
//! | POST   | `/sessions/{id}/undo`        |                                       |
//! | GET    | `/sessions/{id}/history`     |                                       |
//! | GET    | `/schema`                    |                                       |
//! | GET    | `/healthz`                   |                                       |
//!
//! Failures answer with `{code, message, detail}` and a matching status.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manager::{CreateSession, ServiceError, SessionManager};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

fn status_of(code: &str) -> StatusCode {
    match code {
        "session_not_found" | "not_found" => StatusCode::NOT_FOUND,
        "bad_request" => StatusCode::BAD_REQUEST,
        "nothing_to_undo" => StatusCode::CONFLICT,
        "parser_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
        "creation_failed" => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let env = ErrorEnvelope { code: self.code().into(), message: self.to_string(), detail: self.detail() };
        (status_of(&env.code), Json(env)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageBody {
    text: String,
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))
}

/// Runs a blocking manager call off the async workers.
async fn blocking<T: Serialize + Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<Json<T>, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?.map(Json)
}

type Shared = State<Arc<SessionManager>>;

async fn create_session(State(m): Shared, body: Bytes) -> Result<Response, ServiceError> {
    let req: CreateSession = parse_body(&body)?;
    let view = blocking(move || m.create(req)).await?;
    Ok((StatusCode::CREATED, view).into_response())
}

async fn message(State(m): Shared, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ServiceError::BadRequest("body must be {\"text\": ...}".into()));
    }
    let req: MessageBody =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))?;
    blocking(move || m.message(&id, &req.text)).await
}

async fn parameters(State(m): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    blocking(move || m.parameters(&id)).await
}

async fn memory(State(m): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    blocking(move || m.memory(&id)).await
}

async fn undo(State(m): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    blocking(move || m.undo(&id)).await
}

async fn history(State(m): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    blocking(move || m.history(&id)).await
}

async fn schema(State(m): Shared) -> Json<Value> {
    let schema = &m.engine().schema;
    let body: Value = serde_json::from_str(&schema.to_json()).expect("schema JSON is valid");
    Json(json!({ "schema_hash": schema.hash(), "labels": schema.labels(), "schema": body }))
}

async fn healthz(State(m): Shared) -> Json<Value> {
    let mf = &m.engine().manifest;
    Json(json!({
        "status": "ok",
        "service_version": env!("CARGO_PKG_VERSION"),
        "artifacts": {
            "format": mf.format,
            "version": mf.version,
            "schema_hash": mf.schema_hash,
            "scale": mf.build.scale,
            "seed": mf.build.seed,
        },
        "prompt_pack_version": m.editor().ipm.pack.version,
        "grammar_version": m.editor().ipm.grammar.version,
        "llm_backend": m.editor().backend.is_some(),
        "sessions": m.session_count(),
    }))
}

async fn not_found() -> Response {
    let env = ErrorEnvelope { code: "not_found".into(), message: "no such route".into(), detail: Value::Null };
    (StatusCode::NOT_FOUND, Json(env)).into_response()
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/message", post(message))
        .route("/sessions/{id}/parameters", get(parameters))
        .route("/sessions/{id}/memory", get(memory))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/history", get(history))
        .route("/schema", get(schema))
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .with_state(manager)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), sessions = manager.session_count(), "listening");
    axum::serve(listener, router(manager)).await
}
