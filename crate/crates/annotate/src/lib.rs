//! Local HTTP service for blinded human scoring of hold-out documents.
//!
//! Annotators see hold-out texts and the frozen themes, never group labels.
//! Every response body is scanned by a strict [`LeakageGuard`] before it is
//! sent; a hit is journaled and the request fails with status 500.
//! Field names are documented in `api/schema.json`.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/themes` | |
//! | GET | `/session/{annotator}[?seed=N]` | |
//! | GET | `/session/{annotator}/next` | |
//! | POST | `/session/{annotator}/score` | `{document_id, scores}` |
//! | GET | `/progress` | |
//!
//! [`LeakageGuard`]: causal_themes::firewall::LeakageGuard

mod store;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use causal_themes::firewall::{Firewall, FirewallError};
use causal_themes::themes::ThemeError;
use serde::{Deserialize, Serialize};

pub use store::{
    Ack, AnnotateError, NextDocument, Progress, ProgressReport, SessionState, SessionView, Store, StorePaths,
    Submission, ThemesView,
};

/// The API schema shipped with the crate.
pub const API_SCHEMA: &str = include_str!("../api/schema.json");

pub type Shared = Arc<Mutex<Store>>;

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

fn error_response(status: StatusCode, error: &'static str, message: String) -> Response {
    (status, Json(ErrorBody { error, message })).into_response()
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, kind) = match &self {
            AnnotateError::Firewall(FirewallError::StageTooEarly { .. }) => (StatusCode::CONFLICT, "stage_too_early"),
            AnnotateError::Firewall(FirewallError::StageTooLate { .. }) => (StatusCode::CONFLICT, "stage_too_late"),
            AnnotateError::Firewall(FirewallError::Leakage { .. }) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "blinding_violation")
            }
            AnnotateError::Firewall(_) => (StatusCode::INTERNAL_SERVER_ERROR, "journal"),
            AnnotateError::Theme(ThemeError::OutOfScale { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_scale"),
            AnnotateError::Theme(ThemeError::MissingThemes(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "incomplete"),
            AnnotateError::Theme(ThemeError::UnknownTheme(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_theme"),
            AnnotateError::Theme(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_scores"),
            AnnotateError::NoSession(_) => (StatusCode::NOT_FOUND, "no_session"),
            AnnotateError::UnknownDocument(_) => (StatusCode::NOT_FOUND, "unknown_document"),
            AnnotateError::InvalidAnnotator(_) => (StatusCode::BAD_REQUEST, "invalid_annotator"),
            AnnotateError::NotFrozen => (StatusCode::CONFLICT, "themes_not_frozen"),
            AnnotateError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        error_response(status, kind, message)
    }
}

/// Serializes `value` and lets it out only if the blinding scan passes.
fn blinded<T: Serialize>(store: &Store, value: &T, context: &str) -> Result<Response, AnnotateError> {
    let body = serde_json::to_string(value).expect("responses serialize");
    Firewall::open(store.journal())?.check_payload(store.guard(), &body, context)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn lock(shared: &Shared) -> std::sync::MutexGuard<'_, Store> {
    shared.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

#[derive(Deserialize)]
struct SeedQuery {
    seed: Option<u64>,
}

async fn themes(State(shared): State<Shared>) -> Result<Response, AnnotateError> {
    let store = lock(&shared);
    blinded(&store, &store.themes_view()?, "GET /themes")
}

async fn start_session(
    State(shared): State<Shared>,
    Path(annotator): Path<String>,
    Query(q): Query<SeedQuery>,
) -> Result<Response, AnnotateError> {
    let mut store = lock(&shared);
    let view = store.start_session(&annotator, q.seed)?;
    blinded(&store, &view, "GET /session")
}

async fn next_document(State(shared): State<Shared>, Path(annotator): Path<String>) -> Result<Response, AnnotateError> {
    let store = lock(&shared);
    let next = store.next_document(&annotator)?;
    blinded(&store, &next, "GET /session/next")
}

async fn submit_score(
    State(shared): State<Shared>,
    Path(annotator): Path<String>,
    body: Result<Json<Submission>, JsonRejection>,
) -> Result<Response, Response> {
    let Json(submission) =
        body.map_err(|e| error_response(StatusCode::BAD_REQUEST, "malformed_body", e.body_text()))?;
    let mut store = lock(&shared);
    let ack = store.submit(&annotator, &submission).map_err(IntoResponse::into_response)?;
    blinded(&store, &ack, "POST /session/score").map_err(IntoResponse::into_response)
}

async fn progress(State(shared): State<Shared>) -> Result<Response, AnnotateError> {
    let store = lock(&shared);
    blinded(&store, &store.progress_report()?, "GET /progress")
}

pub fn router(store: Store) -> Router {
    let shared: Shared = Arc::new(Mutex::new(store));
    Router::new()
        .route("/themes", get(themes))
        .route("/session/{annotator}", get(start_session))
        .route("/session/{annotator}/next", get(next_document))
        .route("/session/{annotator}/score", post(submit_score))
        .route("/progress", get(progress))
        .with_state(shared)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, store: Store) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, store, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_listener(
    listener: tokio::net::TcpListener,
    store: Store,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(address = %listener.local_addr()?, "annotation service listening");
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}
