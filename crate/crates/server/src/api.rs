//! Routes:
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET  | `/predicates` | predicate catalog |
//! | GET  | `/devices` | registered device ids |
//! | POST | `/queries` | [`SubmitRequest`] → session view |
//! | GET  | `/queries/{session}` | session view |
//! | GET  | `/queries/{session}/results?cursor&limit&wait_ms` | NDJSON [`StreamLine`]s |
//! | POST | `/queries/{session}/feedback` | [`FeedbackRequest`] |
//! | GET  | `/devices/{id}/inbox?wait_ms` | assignment, or 204 |
//! | POST | `/devices/{id}/report` | [`Report`] |
//! | POST | `/partition/evaluate` | multipart `spec` + `photo` → offload reply |

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use sieve_core::coordinator::{AgentError, Coordinator, LookupError, Relevance, SubmitError, SubmitOptions};
use sieve_core::device::Strategy;
use sieve_core::photo::{Photo, PhotoMeta};
use sieve_core::query::{parse_query, QueryError};

use crate::wire::{predicate_catalog, ErrorBody, FeedbackRequest, OffloadSpec, Report, StreamLine, SubmitRequest};

/// Longest a long-poll may hold a connection.
pub const MAX_WAIT: Duration = Duration::from_secs(60);
const DEFAULT_INBOX_WAIT_MS: u64 = 25_000;
const DEFAULT_PAGE: usize = 1000;

pub struct ApiError(StatusCode, ErrorBody);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<LookupError> for ApiError {
    fn from(e: LookupError) -> Self {
        ApiError(StatusCode::NOT_FOUND, ErrorBody::new("not_found", e))
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let mut body = ErrorBody::new("malformed_query", &e);
        match e {
            QueryError::Validation { findings } => {
                body.kind = "invalid_query".into();
                body.findings = findings;
                return ApiError(StatusCode::UNPROCESSABLE_ENTITY, body);
            }
            QueryError::Xml { line, column, .. } | QueryError::Structure { line, column, .. } => {
                body.line = Some(line);
                body.column = Some(column);
            }
            QueryError::ChildCount { line, .. } => body.line = Some(line),
        }
        ApiError(StatusCode::BAD_REQUEST, body)
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::BudgetBelowMinimum { required, .. } => {
                let mut body = ErrorBody::new("budget_below_minimum", &e);
                body.required_minimum = Some(required);
                ApiError(StatusCode::UNPROCESSABLE_ENTITY, body)
            }
            SubmitError::NoDevices => ApiError(StatusCode::SERVICE_UNAVAILABLE, ErrorBody::new("no_devices", e)),
            SubmitError::Query(q) => q.into(),
            SubmitError::Predicate(p) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, ErrorBody::new("invalid_parameters", p)),
        }
    }
}

fn bad_request(e: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, ErrorBody::new("bad_request", e))
}

type Shared = State<Arc<Coordinator>>;

pub fn router(coordinator: Arc<Coordinator>) -> Router {
    Router::new()
        .route("/predicates", get(predicates))
        .route("/devices", get(devices))
        .route("/queries", post(submit))
        .route("/queries/{session}", get(session))
        .route("/queries/{session}/results", get(results))
        .route("/queries/{session}/feedback", post(feedback))
        .route("/devices/{id}/inbox", get(inbox))
        .route("/devices/{id}/report", post(report))
        .route("/partition/evaluate", post(evaluate))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(coordinator)
}

async fn predicates(State(c): Shared) -> Response {
    Json(predicate_catalog(c.registry())).into_response()
}

async fn devices(State(c): Shared) -> Response {
    Json(c.registered_devices()).into_response()
}

async fn submit(State(c): Shared, Json(req): Json<SubmitRequest>) -> Result<Response, ApiError> {
    let options = SubmitOptions {
        budget: req.budget,
        seed: req.seed,
        strategy: req.strategy.unwrap_or(Strategy::Partitioned),
        max_photos: req.max_photos,
    };
    let view = c.submit(&req.query_xml, options)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn session(State(c): Shared, Path(session): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(c.session(&session)?).into_response())
}

#[derive(Deserialize)]
struct ResultsParams {
    #[serde(default)]
    cursor: u64,
    limit: Option<usize>,
    #[serde(default)]
    wait_ms: u64,
}

async fn results(State(c): Shared, Path(session): Path<String>, Query(p): Query<ResultsParams>) -> Result<Response, ApiError> {
    let wait = Duration::from_millis(p.wait_ms).min(MAX_WAIT);
    let limit = p.limit.unwrap_or(DEFAULT_PAGE);
    let page = tokio::task::spawn_blocking(move || c.results(&session, p.cursor, limit, (!wait.is_zero()).then_some(wait)))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", e)))??;
    let mut body = String::new();
    let mut push = |line: &StreamLine| {
        body.push_str(&serde_json::to_string(line).expect("stream lines serialize"));
        body.push('\n');
    };
    for r in page.records {
        push(&StreamLine::Result(r));
    }
    if let Some(done) = page.completion {
        push(&StreamLine::Completion(done));
    }
    push(&StreamLine::Cursor { next_cursor: page.next_cursor, status: page.status });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn feedback(State(c): Shared, Path(session): Path<String>, Json(req): Json<FeedbackRequest>) -> Result<Response, ApiError> {
    let mark = req.relevant.map(|r| if r { Relevance::Relevant } else { Relevance::Irrelevant });
    c.mark_feedback(&session, &req.device_id, &req.photo_id, mark)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Deserialize)]
struct InboxParams {
    wait_ms: Option<u64>,
}

async fn inbox(State(c): Shared, Path(id): Path<String>, Query(p): Query<InboxParams>) -> Result<Response, ApiError> {
    let wait = Duration::from_millis(p.wait_ms.unwrap_or(DEFAULT_INBOX_WAIT_MS)).min(MAX_WAIT);
    let next = tokio::task::spawn_blocking(move || c.wait_assignment(&id, wait))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", e)))?;
    Ok(match next {
        Some(a) => Json(a).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn report(State(c): Shared, Path(id): Path<String>, Json(report): Json<Report>) -> Result<Response, ApiError> {
    match report {
        Report::Result { result, photo } => {
            if result.device_id != id {
                return Err(bad_request(format!("result is for device {:?}, posted as {id:?}", result.device_id)));
            }
            let photo = photo.map(|p| p.to_photo()).transpose().map_err(bad_request)?;
            let index = c.report_result(result, photo.as_ref())?;
            Ok(Json(serde_json::json!({ "arrival_index": index })).into_response())
        }
        Report::Summary { summary } => {
            if summary.device_id != id {
                return Err(bad_request(format!("summary is for device {:?}, posted as {id:?}", summary.device_id)));
            }
            c.report_summary(summary)?;
            Ok(StatusCode::NO_CONTENT.into_response())
        }
        Report::Failure { session, .. } => {
            c.report_failure(&session, &id)?;
            Ok(StatusCode::NO_CONTENT.into_response())
        }
    }
}

async fn evaluate(State(c): Shared, mut form: Multipart) -> Result<Response, ApiError> {
    let mut spec: Option<OffloadSpec> = None;
    let mut ppm: Option<Bytes> = None;
    while let Some(field) = form.next_field().await.map_err(bad_request)? {
        match field.name() {
            Some("spec") => spec = Some(serde_json::from_slice(&field.bytes().await.map_err(bad_request)?).map_err(bad_request)?),
            Some("photo") => ppm = Some(field.bytes().await.map_err(bad_request)?),
            _ => {}
        }
    }
    let spec = spec.ok_or_else(|| bad_request("missing \"spec\" part"))?;
    let ppm = ppm.ok_or_else(|| bad_request("missing \"photo\" part"))?;
    let meta = PhotoMeta::parse(&spec.meta).map_err(bad_request)?;
    let photo = Photo::decode_ppm(spec.photo_id.clone(), &ppm, meta).map_err(bad_request)?;
    let query = parse_query(&spec.query_xml)?;
    let reply = tokio::task::spawn_blocking(move || c.evaluate_offload(&query, &spec.device_id, &photo, &spec.predicates))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", e)))?;
    match reply {
        Ok(r) => Ok(Json(r).into_response()),
        Err(e @ AgentError::UnknownPredicate(_)) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, ErrorBody::new("unknown_predicate", e))),
        Err(e @ AgentError::BadRequest(_)) => Err(bad_request(e)),
    }
}
