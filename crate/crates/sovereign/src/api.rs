//! JSON-over-HTTP API for the management console.
//!
//! ```text
//! GET    /api/status                 full snapshot
//! GET    /api/entities               registered, approved and pending devices
//! GET    /api/rules                  {policy_version, rules}
//! POST   /api/rules                  {rule, expected_version?} -> 201 {id, policy_version}
//! DELETE /api/rules/{id}?expected_version=N -> {policy_version}
//! POST   /api/bootstrap/approve      {label, token, service, location}
//! POST   /api/keys/rotate            {scope}
//! POST   /api/commands               {topic, payload} -> 202 {name}
//! GET    /api/events?since=SEQ       server-sent events, one audit record each
//! ```
//!
//! Errors come back as `{"error": kind, "message": text}`: 400 for bad
//! input, 404 for unknown rules or scopes, 409 when `expected_version` is
//! stale (with `current_version`), 422 when a command cannot be published.

use std::convert::Infallible;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use sovereign_core::controller::ControllerError;
use tokio::sync::broadcast;

use crate::service::{Op, Reply, ServiceError, ServiceHandle};
use crate::state_file::EventFile;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.0.to_string();
        let (status, kind, extra) = match &self.0 {
            ServiceError::Controller(ControllerError::VersionConflict { current, .. }) => {
                (StatusCode::CONFLICT, "version-conflict", json!(current))
            }
            ServiceError::Controller(ControllerError::NoSuchRule(_)) => (StatusCode::NOT_FOUND, "no-such-rule", json!(null)),
            ServiceError::Controller(ControllerError::NoSuchScope(_)) => (StatusCode::NOT_FOUND, "no-such-scope", json!(null)),
            ServiceError::Controller(ControllerError::Policy(_) | ControllerError::Naming(_)) | ServiceError::BadRequest(_) => {
                (StatusCode::BAD_REQUEST, "invalid", json!(null))
            }
            ServiceError::Controller(ControllerError::PubSub(_) | ControllerError::Crypto(_)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "not-published", json!(null))
            }
            ServiceError::State(_) => (StatusCode::INTERNAL_SERVER_ERROR, "state", json!(null)),
            ServiceError::Stopped => (StatusCode::SERVICE_UNAVAILABLE, "stopped", json!(null)),
        };
        let mut body = json!({ "error": kind, "message": message });
        if !extra.is_null() {
            body["current_version"] = extra;
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn status(State(h): State<ServiceHandle>) -> impl IntoResponse {
    Json(h.snapshot())
}

async fn entities(State(h): State<ServiceHandle>) -> impl IntoResponse {
    let s = h.snapshot();
    Json(json!({ "entities": s.entities, "approvals": s.approvals, "pending": s.pending }))
}

async fn rules(State(h): State<ServiceHandle>) -> impl IntoResponse {
    let s = h.snapshot();
    Json(json!({ "policy_version": s.policy_version, "rules": s.rules }))
}

#[derive(Deserialize)]
struct AddRule {
    rule: String,
    expected_version: Option<u64>,
}

async fn add_rule(State(h): State<ServiceHandle>, Json(b): Json<AddRule>) -> ApiResult<(StatusCode, Json<Reply>)> {
    let r = h.call(Op::AddRule { rule: b.rule, expected_version: b.expected_version }).await?;
    Ok((StatusCode::CREATED, Json(r)))
}

#[derive(Deserialize)]
struct Expected {
    expected_version: Option<u64>,
}

async fn remove_rule(State(h): State<ServiceHandle>, Path(id): Path<u64>, Query(q): Query<Expected>) -> ApiResult<Json<Reply>> {
    Ok(Json(h.call(Op::RemoveRule { id, expected_version: q.expected_version }).await?))
}

#[derive(Deserialize)]
struct Approve {
    label: String,
    token: String,
    service: String,
    location: String,
}

async fn approve(State(h): State<ServiceHandle>, Json(b): Json<Approve>) -> ApiResult<Json<Reply>> {
    Ok(Json(h.call(Op::Approve { label: b.label, token: b.token, service: b.service, location: b.location }).await?))
}

#[derive(Deserialize)]
struct Rotate {
    scope: String,
}

async fn rotate(State(h): State<ServiceHandle>, Json(b): Json<Rotate>) -> ApiResult<Json<Reply>> {
    Ok(Json(h.call(Op::RotateKey { scope: b.scope }).await?))
}

#[derive(Deserialize)]
struct Command {
    topic: String,
    #[serde(default)]
    payload: String,
}

async fn command(State(h): State<ServiceHandle>, Json(b): Json<Command>) -> ApiResult<(StatusCode, Json<Reply>)> {
    let r = h.call(Op::Command { topic: b.topic, payload: b.payload.into_bytes() }).await?;
    Ok((StatusCode::ACCEPTED, Json(r)))
}

#[derive(Deserialize)]
struct Since {
    since: Option<u64>,
}

fn sse_event(e: &EventFile) -> Event {
    Event::default().id(e.seq.to_string()).event("audit").json_data(e).expect("event serializes")
}

/// Buffered history newer than `since`, then live events. Subscribing
/// before reading the history means nothing falls in between; the seq
/// filter drops the overlap.
fn event_stream(h: &ServiceHandle, since: Option<u64>) -> impl Stream<Item = Result<Event, Infallible>> {
    let live = h.subscribe();
    let history: Vec<EventFile> =
        h.snapshot().recent_events.into_iter().filter(|e| since.is_none_or(|s| e.seq > s)).collect();
    let floor = history.last().map(|e| e.seq).or(since);
    let replay = stream::iter(history.iter().map(sse_event).map(Ok).collect::<Vec<_>>());
    let tail = stream::unfold(live, move |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) if floor.is_none_or(|f| e.seq > f) => return Some((Ok(sse_event(&e)), rx)),
                Ok(_) => continue,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let ev = Event::default().event("lagged").data(n.to_string());
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    replay.chain(tail)
}

async fn events(State(h): State<ServiceHandle>, Query(q): Query<Since>) -> impl IntoResponse {
    Sse::new(event_stream(&h, q.since)).keep_alive(KeepAlive::default())
}

pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/entities", get(entities))
        .route("/api/rules", get(rules).post(add_rule))
        .route("/api/rules/:id", delete(remove_rule))
        .route("/api/bootstrap/approve", post(approve))
        .route("/api/keys/rotate", post(rotate))
        .route("/api/commands", post(command))
        .route("/api/events", get(events))
        .with_state(handle)
}
