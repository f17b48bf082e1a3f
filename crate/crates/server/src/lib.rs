//! JSON-over-HTTP routes for a [`DecisionService`], with a server-sent-events
//! stream of prediction frames per session.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};

use nextact::domain::DynamicContextRecord;
use nextact::service::{CreateSession, DecisionService, Override};
use nextact::Error;

pub type AppState = Arc<DecisionService>;

/// A service error rendered as `{"error": kind, "message": text}`.
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minute: Option<u32>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, minute) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            Error::EndOfCase(m) => (StatusCode::CONFLICT, "end_of_case", Some(*m)),
            Error::Mode(_) => (StatusCode::CONFLICT, "mode", None),
            Error::Closed => (StatusCode::GONE, "closed", None),
            Error::CatalogMismatch { .. } => (StatusCode::CONFLICT, "catalog_mismatch", None),
            Error::UnknownActivity(_) => (StatusCode::BAD_REQUEST, "unknown_activity", None),
            Error::UnknownCategory { .. }
            | Error::InvalidArgument { .. }
            | Error::NonFinite(_)
            | Error::InvalidCase { .. }
            | Error::Json(_) => (StatusCode::BAD_REQUEST, "invalid", None),
            Error::CorruptCheckpoint(_) | Error::Version { .. } | Error::Io { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "checkpoint", None)
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
            minute,
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct LoadModel {
    pub path: String,
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelRef {
    pub model_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordEvent {
    pub activity: String,
    pub start_s: i64,
    pub end_s: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CatalogBody {
    pub activities: Vec<String>,
    pub hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub minutes: u32,
}

#[derive(Debug, Default, Deserialize)]
pub struct CatalogQuery {
    pub model_id: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct TimelineQuery {
    pub model_id: String,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

fn default_cutoff() -> f64 {
    0.5
}

async fn load_model(State(svc): State<AppState>, Json(req): Json<LoadModel>) -> ApiResult<impl IntoResponse> {
    let model_id = svc.load_model(&req.path, req.model_id)?;
    Ok((StatusCode::CREATED, Json(ModelRef { model_id })))
}

async fn list_models(State(svc): State<AppState>) -> Json<Vec<String>> {
    Json(svc.model_ids())
}

async fn create_session(State(svc): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(svc.create_session(req)?)))
}

async fn session_info(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.session_info(&id)?))
}

async fn close_session(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    svc.close_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn tick(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.tick(&id)?))
}

async fn frames(State(svc): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.frames(&id)?))
}

async fn add_override(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Json(change): Json<Override>,
) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(svc.apply_override(&id, change)?)))
}

async fn remove_override(
    State(svc): State<AppState>,
    Path((id, oid)): Path<(String, u64)>,
) -> ApiResult<StatusCode> {
    svc.remove_override(&id, oid)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn record_event(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RecordEvent>,
) -> ApiResult<impl IntoResponse> {
    let event = svc.record_event(&id, &req.activity, req.start_s, req.end_s)?;
    Ok((StatusCode::CREATED, Json(event)))
}

async fn record_vitals(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Json(record): Json<DynamicContextRecord>,
) -> ApiResult<StatusCode> {
    svc.record_vitals(&id, record)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stream(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let frames = svc.subscribe(&id)?;
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        while let Ok(frame) = frames.recv() {
            if tx.send(frame).is_err() {
                break;
            }
        }
    });
    let events = futures::stream::unfold(rx, |mut rx| async move {
        let frame = rx.recv().await?;
        let event = Event::default()
            .event("frame")
            .id(frame.minute.to_string())
            .json_data(&frame)
            .unwrap_or_else(|e| Event::default().event("error").data(e.to_string()));
        Some((Ok(event), rx))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn catalog(State(svc): State<AppState>, Query(q): Query<CatalogQuery>) -> ApiResult<impl IntoResponse> {
    let catalog = svc.catalog(q.model_id.as_deref())?;
    Ok(Json(CatalogBody {
        hash: catalog.hash(),
        activities: catalog.labels().to_vec(),
    }))
}

async fn cases(State(svc): State<AppState>) -> ApiResult<impl IntoResponse> {
    let out = svc
        .case_ids()
        .into_iter()
        .map(|id| {
            let minutes = svc.case(&id)?.minutes();
            Ok(CaseSummary { case_id: id, minutes })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Json(out))
}

async fn timeline(
    State(svc): State<AppState>,
    Path(case_id): Path<String>,
    Query(q): Query<TimelineQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.timeline(&case_id, &q.model_id, q.cutoff)?))
}

pub fn router(service: AppState) -> Router {
    Router::new()
        .route("/models", post(load_model).get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(close_session))
        .route("/sessions/{id}/tick", post(tick))
        .route("/sessions/{id}/frames", get(frames))
        .route("/sessions/{id}/stream", get(stream))
        .route("/sessions/{id}/overrides", post(add_override))
        .route("/sessions/{id}/overrides/{oid}", delete(remove_override))
        .route("/sessions/{id}/events", post(record_event))
        .route("/sessions/{id}/vitals", post(record_vitals))
        .route("/catalog", get(catalog))
        .route("/cases", get(cases))
        .route("/reports/timeline/{case}", get(timeline))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, service: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
