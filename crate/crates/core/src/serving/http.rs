use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::server::Server;
use crate::error::Error;
use crate::scheduler::{FinishReason, NewRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub id: u64,
    pub text: String,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub finish_reason: FinishReason,
    pub worker: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        Error::PromptTooLong { .. } | Error::ExceedsPoolCapacity { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        Error::QueueFull(_) | Error::WorkerUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn router(server: Arc<Server>) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/metrics", get(metrics))
        .route("/v1/health", get(health))
        .with_state(server)
}

// The body is parsed by hand so every malformed payload maps to 400.
async fn generate(State(server): State<Arc<Server>>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")),
    };
    let request = NewRequest::new(req.prompt.into_bytes(), req.max_new_tokens);
    let (id, worker, pending) = match server.submit(request) {
        Ok(p) => p,
        Err(e) => return error_response(status_for(&e), e.to_string()),
    };
    match pending.await {
        Ok(Ok(out)) => Json(GenerateResponse {
            id: id.0,
            prompt_tokens: out.prompt_tokens,
            generated_tokens: out.generated.len(),
            text: out.text,
            finish_reason: out.finish_reason,
            worker,
        })
        .into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.to_string()),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, Error::WorkerUnavailable.to_string()),
    }
}

async fn metrics(State(server): State<Arc<Server>>) -> Response {
    Json(server.metrics()).into_response()
}

async fn health() -> &'static str {
    "ok"
}

/// Bind `addr` and serve until `shutdown` resolves.
pub async fn serve(
    server: Arc<Server>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(server, listener, shutdown).await
}

pub async fn serve_on(
    server: Arc<Server>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(server)).with_graceful_shutdown(shutdown).await
}
