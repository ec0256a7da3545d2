use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Deserialize;
use vate_core::model::SessionId;

use crate::api::{Accepted, ApiError, ErrorCode, EventBatch, JudgmentBatch, MessageRequest, SubmissionRequest};
use crate::AppState;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let state = Arc::clone(state);
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(result) => result.map(Json),
        Err(e) => {
            log::error!("handler task failed: {e}");
            Err(ApiError::new(ErrorCode::Internal, "internal error"))
        }
    }
}

pub(crate) async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(token) if state.token_matches(token.trim()) => next.run(request).await,
        _ => ApiError::new(ErrorCode::Unauthorized, "missing or invalid bearer token").into_response(),
    }
}

pub(crate) async fn submit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<SubmissionRequest>, JsonRejection>,
) -> ApiResult<crate::api::SubmissionResponse> {
    let req = body(payload)?;
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_owned);
    blocking(&state, move |s| s.submit(req, key.as_deref())).await
}

pub(crate) async fn message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    payload: Result<Json<MessageRequest>, JsonRejection>,
) -> ApiResult<crate::api::TurnView> {
    let req = body(payload)?;
    blocking(&state, move |s| s.message(&SessionId::new(id), &req.text)).await
}

pub(crate) async fn session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<crate::api::SessionView> {
    blocking(&state, move |s| s.session_view(&SessionId::new(id))).await
}

pub(crate) async fn summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<crate::api::SummaryView> {
    blocking(&state, move |s| s.summary(&SessionId::new(id))).await
}

pub(crate) async fn pool_stats(State(state): State<Arc<AppState>>) -> ApiResult<vate_core::pool::PoolStats> {
    blocking(&state, |s| Ok(s.pool_stats())).await
}

#[derive(Deserialize)]
pub(crate) struct ReportQuery {
    group: Option<String>,
}

pub(crate) async fn report(
    State(state): State<Arc<AppState>>,
    query: Result<Query<ReportQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<crate::api::ReportView> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let group = q.group.unwrap_or_else(|| "outcomes".to_owned());
    blocking(&state, move |s| s.report(&group)).await
}

pub(crate) async fn post_events(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<EventBatch>, JsonRejection>,
) -> ApiResult<Accepted> {
    let batch = body(payload)?;
    blocking(&state, move |s| Ok(Accepted { accepted: s.add_events(batch.events) })).await
}

pub(crate) async fn post_judgments(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<JudgmentBatch>, JsonRejection>,
) -> ApiResult<Accepted> {
    let batch = body(payload)?;
    blocking(&state, move |s| s.add_judgments(batch.judgments).map(|accepted| Accepted { accepted })).await
}

pub(crate) async fn winrates(State(state): State<Arc<AppState>>) -> ApiResult<crate::api::WinRates> {
    blocking(&state, |s| Ok(s.winrates())).await
}
