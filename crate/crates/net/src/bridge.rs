//! Operator HTTP bridge: graph and report inspection, runtime node edits,
//! and a server-sent event stream with one frame per fusion cycle.

use crate::server::{Command, NodeCommandError};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;
use std::convert::Infallible;
use std::sync::Arc;
use tokio::sync::{broadcast, mpsc, oneshot, watch};

#[derive(Clone)]
pub(crate) struct BridgeState {
    pub commands: mpsc::Sender<Command>,
    pub frames: broadcast::Sender<Arc<str>>,
    pub shutdown: watch::Receiver<bool>,
}

pub(crate) fn router(state: BridgeState) -> Router {
    Router::new()
        .route("/graph", get(graph))
        .route("/report", get(report))
        .route("/metrics", get(metrics))
        .route("/nodes", post(add_node))
        .route("/nodes/{id}", delete(remove_node))
        .route("/anchor/{id}", post(force_anchor))
        .route("/events", get(events))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn unavailable() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "server shutting down")
}

async fn ask<T>(state: &BridgeState, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Option<T> {
    let (tx, rx) = oneshot::channel();
    state.commands.send(make(tx)).await.ok()?;
    rx.await.ok()
}

fn node_result(r: Result<(), NodeCommandError>, ok: StatusCode) -> Response {
    match r {
        Ok(()) => ok.into_response(),
        Err(e @ NodeCommandError::Unknown(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ NodeCommandError::Conflict(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e @ NodeCommandError::Invalid(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn graph(State(state): State<BridgeState>) -> Response {
    match ask(&state, |reply| Command::Graph { reply }).await {
        Some(g) => Json(g).into_response(),
        None => unavailable(),
    }
}

async fn report(State(state): State<BridgeState>) -> Response {
    match ask(&state, |reply| Command::Report { reply }).await {
        Some(r) => Json(r).into_response(),
        None => unavailable(),
    }
}

async fn metrics(State(state): State<BridgeState>) -> Response {
    match ask(&state, |reply| Command::Metrics { reply }).await {
        Some(m) => Json(m).into_response(),
        None => unavailable(),
    }
}

#[derive(Deserialize)]
struct NewNode {
    id: String,
}

async fn add_node(State(state): State<BridgeState>, body: Option<Json<NewNode>>) -> Response {
    let Some(Json(node)) = body else {
        return error(StatusCode::BAD_REQUEST, "expected {\"id\": name}");
    };
    if node.id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty node id");
    }
    match ask(&state, |reply| Command::AddNode { name: node.id, reply }).await {
        Some(r) => node_result(r, StatusCode::CREATED),
        None => unavailable(),
    }
}

async fn remove_node(State(state): State<BridgeState>, Path(id): Path<String>) -> Response {
    match ask(&state, |reply| Command::RemoveNode { name: id, reply }).await {
        Some(r) => node_result(r, StatusCode::NO_CONTENT),
        None => unavailable(),
    }
}

async fn force_anchor(State(state): State<BridgeState>, Path(id): Path<String>) -> Response {
    match ask(&state, |reply| Command::ForceAnchor { name: id, reply }).await {
        Some(r) => node_result(r, StatusCode::OK),
        None => unavailable(),
    }
}

async fn events(State(state): State<BridgeState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.frames.subscribe();
    let stop = state.shutdown.clone();
    let stream = stream::unfold((rx, stop), |(mut rx, mut stop)| async move {
        loop {
            if *stop.borrow() {
                return None;
            }
            let frame = tokio::select! {
                _ = stop.wait_for(|s| *s) => None,
                frame = rx.recv() => Some(frame),
            };
            match frame {
                None => return None,
                Some(Ok(data)) => {
                    let event = Event::default().event("cycle").data(data.as_ref());
                    return Some((Ok(event), (rx, stop)));
                }
                // a slow client skips frames instead of holding the cycle back
                Some(Err(broadcast::error::RecvError::Lagged(_))) => continue,
                Some(Err(broadcast::error::RecvError::Closed)) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
