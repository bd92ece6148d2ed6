//! Admin HTTP API.

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedcampus_core::protocol::TaskRequest;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::config::SessionRequest;
use crate::registry::{Registered, RegistryError};
use crate::server::{Orchestrator, OrchestratorError};

pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(detail: impl ToString) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: "BadRequest",
            detail: detail.to_string(),
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError::*;
        let (status, error) = match &e {
            Registry(RegistryError::InvalidModel(_)) => (StatusCode::BAD_REQUEST, "InvalidModel"),
            Registry(RegistryError::UnknownModel { .. }) => (StatusCode::NOT_FOUND, "UnknownModel"),
            Registry(RegistryError::Replay(_)) | Storage(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "StorageError")
            }
            PortPoolExhausted => (StatusCode::SERVICE_UNAVAILABLE, "PortPoolExhausted"),
            Bind(_) => (StatusCode::SERVICE_UNAVAILABLE, "PortUnavailable"),
            InvalidConfig(_) => (StatusCode::BAD_REQUEST, "InvalidConfig"),
            DuplicateSession(_) => (StatusCode::CONFLICT, "DuplicateSession"),
            UnknownSession(_) => (StatusCode::NOT_FOUND, "UnknownSession"),
            UnknownQuery(_) => (StatusCode::NOT_FOUND, "UnknownQuery"),
        };
        ApiError {
            status,
            error,
            detail: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.error, "detail": self.detail })),
        )
            .into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(status: StatusCode, body: T) -> ApiResult {
    Ok((status, Json(body)).into_response())
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(ApiError::bad_request)
}

pub fn router(orch: Orchestrator) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(list_models).post(register_model))
        .route("/api/sessions", get(list_sessions).post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/stop", post(stop_session))
        .route("/api/sessions/{id}/rounds", get(get_rounds))
        .route("/api/queries/{id}/result", get(get_result))
        .route("/api/tasks", post(list_tasks))
        .with_state(orch)
}

/// Serves the admin API until the listener fails.
pub async fn serve(orch: Orchestrator, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(orch)).await
}

async fn health(State(o): State<Orchestrator>) -> ApiResult {
    ok(
        StatusCode::OK,
        json!({ "status": "ok", "live_sessions": o.live_sessions() }),
    )
}

async fn list_models(State(o): State<Orchestrator>) -> ApiResult {
    ok(StatusCode::OK, o.models())
}

async fn register_model(State(o): State<Orchestrator>, body: Bytes) -> ApiResult {
    let (entry, status) = o.register_model(&body)?;
    let code = if status == Registered::New {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    ok(
        code,
        json!({ "model_id": entry.model_id, "version": entry.version, "duplicate": status == Registered::Duplicate }),
    )
}

async fn list_sessions(State(o): State<Orchestrator>) -> ApiResult {
    ok(StatusCode::OK, o.sessions())
}

async fn create_session(State(o): State<Orchestrator>, body: Bytes) -> ApiResult {
    let req: SessionRequest = parse(&body)?;
    ok(StatusCode::CREATED, o.create_session(req)?)
}

async fn get_session(State(o): State<Orchestrator>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, o.session(&id)?)
}

async fn stop_session(State(o): State<Orchestrator>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, o.stop_session(&id).await?)
}

async fn get_rounds(State(o): State<Orchestrator>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, o.rounds(&id)?)
}

async fn get_result(State(o): State<Orchestrator>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, o.fa_result(&id)?)
}

async fn list_tasks(State(o): State<Orchestrator>, body: Bytes) -> ApiResult {
    let req: TaskRequest = parse(&body)?;
    ok(StatusCode::OK, o.list_tasks(req.platform, &req.app_version))
}
