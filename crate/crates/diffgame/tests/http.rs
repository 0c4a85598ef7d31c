use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use diffgame::http::router;
use diffgame::service::{ErrorBody, SessionCreated, SessionManager, SessionStatus, StepResponse};
use futures::StreamExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(Arc::new(SessionManager::new()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn create(app: &Router, body: Value) -> SessionCreated {
    let (status, bytes) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

fn error(bytes: &[u8]) -> ErrorBody {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn session_lifecycle() {
    let app = app();
    let created = create(&app, json!({ "scenario": "linear-duel" })).await;
    assert_eq!(created.scenario.name, "linear-duel");
    assert_eq!(created.scenario.control_dims, [1, 1]);
    let id = created.session;

    let (status, bytes) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "u_intended": [0.2, -0.1], "steps": 3 }))).await;
    assert_eq!(status, StatusCode::OK);
    let resp: StepResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.step, 3);
    assert_eq!(resp.status, SessionStatus::Active);
    assert_eq!(resp.fan.len(), 1);
    assert_eq!(resp.fan[0].prediction.phi_hat.len(), 100);

    let (status, bytes) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&bytes).unwrap(), json!({ "closed": id.to_string() }));

    let (status, bytes) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "u_intended": [0.0, 0.0] }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&bytes).code, "UnknownSession");
    let (status, bytes) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&bytes).code, "UnknownSession");
}

#[tokio::test]
async fn errors_have_code_message_and_field() {
    let app = app();
    let (status, bytes) = call(&app, Method::POST, "/sessions", Some(json!({ "scenario": "chess" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e = error(&bytes);
    assert_eq!((e.code.as_str(), e.field.as_deref()), ("ValidationError", Some("scenario")));
    assert!(!e.message.is_empty());

    let (status, bytes) = call(&app, Method::POST, "/sessions", Some(json!({ "scenario": "linear-duel", "warmup_steps": 3 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&bytes).field.as_deref(), Some("warmup_steps"));

    let (status, bytes) = call(&app, Method::POST, "/sessions", Some(json!({ "scenario": 7 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&bytes).code, "ValidationError");

    let id = create(&app, json!({ "scenario": "linear-duel" })).await.session;
    let (status, bytes) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "u_intended": [1.0, 2.0, 3.0] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error(&bytes).field.as_deref(), Some("u_intended"));

    let (status, bytes) = call(&app, Method::GET, "/sessions/999/stream", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(&bytes).code, "UnknownSession");
    let (status, _) = call(&app, Method::POST, "/sessions/abc/step", Some(json!({ "u_intended": [0.0, 0.0] }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identical_sessions_answer_identically() {
    let app = app();
    let body = json!({
        "scenario": "cross-coupled",
        "selection": { "mode": "pool", "size": 3, "seed": 5 },
        "horizon": { "dt1": 0.1, "dt2": 0.2, "theta": 1e-3, "t_max": 0.5 }
    });
    let a = create(&app, body.clone()).await.session;
    let b = create(&app, body).await.session;
    for u in [[0.3, 0.0], [0.1, -0.2], [0.0, 0.4]] {
        let step = json!({ "u_intended": u, "steps": 2 });
        let (_, ra) = call(&app, Method::POST, &format!("/sessions/{a}/step"), Some(step.clone())).await;
        let (_, rb) = call(&app, Method::POST, &format!("/sessions/{b}/step"), Some(step)).await;
        assert_eq!(ra, rb);
        let resp: StepResponse = serde_json::from_slice(&ra).unwrap();
        assert_eq!(resp.fan.len(), 3);
    }
}

#[tokio::test]
async fn numbers_keep_full_precision() {
    let app = app();
    let id = create(&app, json!({ "scenario": "linear-duel" })).await.session;
    let (_, bytes) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "u_intended": [0.2, -0.1] }))).await;
    let resp: StepResponse = serde_json::from_slice(&bytes).unwrap();
    let reencoded: StepResponse = serde_json::from_str(&serde_json::to_string(&resp).unwrap()).unwrap();
    assert_eq!(resp, reencoded);
    // phi(t) for the duel is irrational-looking; make sure it was not rounded.
    let text = String::from_utf8(bytes).unwrap();
    let state = format!("{:?}", resp.state[0]);
    assert!(state.len() > 12 && text.contains(&state), "{state}");
}

#[tokio::test]
async fn stream_mirrors_step_responses() {
    let app = app();
    let id = create(&app, json!({ "scenario": "linear-duel" })).await.session;
    let req = Request::builder().uri(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body().into_data_stream();

    let mut sent = Vec::new();
    for u in [[0.2, -0.1], [0.5, 0.5]] {
        let (_, bytes) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "u_intended": u }))).await;
        sent.push(serde_json::from_slice::<Value>(&bytes).unwrap());
    }

    let mut buf = String::new();
    let mut events = Vec::new();
    while events.len() < 2 {
        let chunk = tokio::time::timeout(Duration::from_secs(10), body.next()).await.expect("event in time").unwrap().unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            if frame.starts_with(':') {
                continue;
            }
            let mut lines = frame.lines();
            assert_eq!(lines.next(), Some("event: step"));
            let data = lines.next().unwrap().strip_prefix("data: ").unwrap();
            events.push(serde_json::from_str::<Value>(data).unwrap());
        }
    }
    assert_eq!(events, sent);

    // Closing the session ends the stream.
    call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    let end = tokio::time::timeout(Duration::from_secs(10), body.next()).await.expect("stream ends");
    assert!(end.is_none());
}
