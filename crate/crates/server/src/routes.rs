use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use radiosynth_core::study::{build_deck, NextItem, Outcome, StudySession};
use radiosynth_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::AppState;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Sequencing(_) => (StatusCode::CONFLICT, "out_of_sequence"),
            Error::State(_) => (StatusCode::CONFLICT, "invalid_state"),
            Error::Argument(_) | Error::Format(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": kind, "message": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub observer: String,
    #[serde(default)]
    pub deck_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    /// False when an active session for the same observer was resumed.
    pub created: bool,
}

#[derive(Debug, Deserialize)]
pub struct ResponseBody {
    pub image_id: String,
    pub value: f64,
    #[serde(default)]
    pub elapsed_ms: u64,
}

fn new_session_id() -> String {
    format!("{:016x}{:016x}", rand::random::<u64>(), rand::random::<u64>())
}

/// Image URLs carry the session so per-deck ids stay unambiguous.
fn image_token(session_id: &str, image_id: &str) -> String {
    format!("{session_id}_{image_id}")
}

async fn create_session(State(st): State<Arc<AppState>>, Json(body): Json<CreateSession>) -> ApiResult<Json<CreatedSession>> {
    let observer = body.observer.trim().to_string();
    if observer.is_empty() {
        return Err(Error::Argument("observer label is required".into()).into());
    }
    let _guard = st.create_lock.lock().await;
    let existing: Vec<_> = st.sessions.lock().expect("session map lock").values().cloned().collect();
    for handle in existing {
        let s = handle.lock().await;
        if s.observer == observer && !s.is_complete() {
            return Ok(Json(CreatedSession { session_id: s.id.clone(), created: false }));
        }
    }
    let deck = build_deck(&st.real_refs, &st.fake_refs, st.config.n_each, body.deck_seed)?;
    let session = StudySession::new(new_session_id(), observer, deck, st.config.deadline_secs)?;
    st.store.save(&session)?;
    let id = session.id.clone();
    st.sessions.lock().expect("session map lock").insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(CreatedSession { session_id: id, created: true }))
}

fn lookup(st: &AppState, id: &str) -> ApiResult<crate::SessionHandle> {
    st.session(id).ok_or_else(|| Error::NotFound(format!("session {id}")).into())
}

async fn next_item(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let handle = lookup(&st, &id)?;
    let mut s = handle.lock().await;
    let before = (s.cursor, s.responses.len());
    let next = s.next_item(st.clock.now_ms());
    // Stamping a deadline or expiring an item both change the session.
    if before != (s.cursor, s.responses.len()) || matches!(next, NextItem::Item { .. }) {
        st.store.save(&s)?;
    }
    Ok(Json(match next {
        NextItem::Done => json!({ "done": true }),
        NextItem::Item { item, index, total, deadline_epoch_ms } => json!({
            "image_id": item.image_id,
            "image_url": format!("/image/{}", image_token(&s.id, &item.image_id)),
            "index": index,
            "total": total,
            "deadline_epoch_ms": deadline_epoch_ms,
        }),
    }))
}

async fn image(State(st): State<Arc<AppState>>, Path(token): Path<String>) -> ApiResult<Response> {
    let not_found = || ApiError(Error::NotFound(format!("image {token}")));
    let (sid, image_id) = token.rsplit_once('_').ok_or_else(not_found)?;
    let handle = st.session(sid).ok_or_else(not_found)?;
    let file_ref = {
        let s = handle.lock().await;
        let pos = s.deck.items.iter().position(|i| i.image_id == image_id).ok_or_else(not_found)?;
        // Delivered items plus one ahead for preloading; nothing further.
        if pos > s.cursor + 1 {
            return Err(not_found());
        }
        s.deck.items[pos].file_ref.clone()
    };
    let bytes = tokio::fs::read(&file_ref).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], Body::from(bytes)).into_response())
}

async fn record_response(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ResponseBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let handle = lookup(&st, &id)?;
    let mut s = handle.lock().await;
    let outcome = s.record_response(&body.image_id, body.value, body.elapsed_ms, st.clock.now_ms())?;
    st.store.save(&s)?;
    let label = match outcome {
        Outcome::Accepted => "accepted",
        Outcome::TimedOut => "timed_out",
    };
    Ok(Json(json!({ "status": label })))
}

async fn report(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let handle = lookup(&st, &id)?;
    let s = handle.lock().await;
    let report = s.score()?;
    Ok(Json(serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?))
}

async fn transcript(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = lookup(&st, &id)?;
    let csv = handle.lock().await.transcript_csv();
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/next", get(next_item))
        .route("/session/{id}/response", post(record_response))
        .route("/session/{id}/report", get(report))
        .route("/session/{id}/transcript.csv", get(transcript))
        .route("/image/{token}", get(image));
    let api = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}
