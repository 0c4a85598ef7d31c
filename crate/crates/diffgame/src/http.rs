//! HTTP front end of the session service.
//!
//! ```text
//! POST   /sessions              CreateSession   -> SessionCreated
//! POST   /sessions/{id}/step    StepRequest     -> StepResponse
//! DELETE /sessions/{id}                         -> {"closed": id}
//! GET    /sessions/{id}/stream  server-sent events, `event: step`
//! ```
//!
//! Errors answer with `{code, message, field?}`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::Stream;
use tokio::sync::broadcast::error::RecvError;

use crate::service::{CreateSession, ErrorBody, ServiceError, SessionManager, StepRequest};

struct ApiError(StatusCode, ErrorBody);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::Validation { .. } => StatusCode::BAD_REQUEST,
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Terminated(_) => StatusCode::CONFLICT,
        };
        Self(status, e.body())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self(StatusCode::BAD_REQUEST, ErrorBody { code: "ValidationError".into(), message: e.body_text(), field: None })
    }
}

fn internal(e: tokio::task::JoinError) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { code: "InternalError".into(), message: e.to_string(), field: None })
}

type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}", delete(close))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(manager)
}

async fn create(State(mgr): State<Shared>, body: Result<Json<CreateSession>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let created = tokio::task::spawn_blocking(move || mgr.create(&req)).await.map_err(internal)??;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn step(State(mgr): State<Shared>, Path(id): Path<String>, body: Result<Json<StepRequest>, JsonRejection>) -> Result<Response, ApiError> {
    // Unknown ids win over malformed bodies.
    mgr.get(&id)?;
    let Json(req) = body?;
    let resp = tokio::task::spawn_blocking(move || mgr.step(&id, &req)).await.map_err(internal)??;
    Ok(Json(resp).into_response())
}

async fn close(State(mgr): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    mgr.close(&id)?;
    Ok(Json(serde_json::json!({ "closed": id })).into_response())
}

async fn stream(State(mgr): State<Shared>, Path(id): Path<String>) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = mgr.subscribe(&id)?;
    let events = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(json) => return Some((Ok(Event::default().event("step").data(&*json)), rx)),
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

/// Serves on `addr` until interrupted.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(SessionManager::new())))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
