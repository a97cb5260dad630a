//! JSON HTTP API.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mimir_core::roleplay::RoleplayError;
use mimir_core::types::{DatasetDescriptor, FieldError, Role, TopicKind};
use mimir_core::verify::TurnSelection;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::job::{Job, JobKind, JobSummary};
use crate::scheduler::{Scheduler, SchedulerError, VerifyJobConfig};
use crate::topics::TopicStoreError;

pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 500;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    InvalidConfig(Vec<FieldError>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({"error": "not_found", "message": m})),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({"error": "bad_request", "message": m})),
            ApiError::InvalidConfig(fields) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "invalid_config", "fields": fields}),
            ),
            ApiError::Internal(m) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "internal", "message": m}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::InvalidConfig(fields) => ApiError::InvalidConfig(fields),
            SchedulerError::NotFound(id) => ApiError::NotFound(format!("job {id} not found")),
            SchedulerError::Store(e) => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(scheduler: Arc<Scheduler>) -> Router {
    Router::new()
        .route("/api/datasets", get(datasets))
        .route("/api/topics", post(add_topics))
        .route("/api/roles", get(roles))
        .route("/api/jobs", get(list_jobs).post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/cancel", post(cancel_job))
        .route("/api/jobs/{id}/samples", get(samples))
        .route("/api/verify", post(submit_verify))
        .route("/api/finetune", post(submit_finetune))
        .with_state(scheduler)
}

#[derive(Deserialize)]
struct DatasetQuery {
    #[serde(default)]
    q: String,
}

async fn datasets(State(s): State<Arc<Scheduler>>, Query(query): Query<DatasetQuery>) -> ApiResult<Vec<DatasetDescriptor>> {
    Ok(Json(s.app().pipeline.registry.search_datasets(&query.q)))
}

#[derive(Deserialize)]
struct TopicUpload {
    kind: TopicKind,
    lines: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct Added {
    pub added: usize,
}

async fn add_topics(
    State(s): State<Arc<Scheduler>>,
    body: Result<Json<TopicUpload>, JsonRejection>,
) -> ApiResult<Added> {
    let Json(upload) = body?;
    let added = s.app().topics.add_lines(upload.kind, &upload.lines).map_err(|e| match e {
        TopicStoreError::Ingest(e) => ApiError::BadRequest(e.to_string()),
        other => ApiError::Internal(other.to_string()),
    })?;
    Ok(Json(Added { added }))
}

#[derive(Deserialize)]
struct RoleQuery {
    domain: Option<String>,
}

async fn roles(State(s): State<Arc<Scheduler>>, Query(query): Query<RoleQuery>) -> ApiResult<Vec<Role>> {
    let domain = query.domain.unwrap_or_else(|| mimir_core::pipeline::DEFAULT_DOMAIN.to_owned());
    s.app().pipeline.roles.load_roles(&domain).map(Json).map_err(|e| match e {
        RoleplayError::UnknownDomain(_) => ApiError::NotFound(e.to_string()),
        other => ApiError::Internal(other.to_string()),
    })
}

#[derive(Deserialize)]
struct Submission {
    kind: JobKind,
    #[serde(default)]
    config: Value,
}

#[derive(Serialize, Deserialize)]
pub struct Submitted {
    pub id: String,
}

async fn submit_job(
    State(s): State<Arc<Scheduler>>,
    body: Result<Json<Submission>, JsonRejection>,
) -> ApiResult<Submitted> {
    let Json(sub) = body?;
    let config = if sub.config.is_null() { json!({}) } else { sub.config };
    let job = s.submit(sub.kind, config)?;
    Ok(Json(Submitted { id: job.id }))
}

async fn list_jobs(State(s): State<Arc<Scheduler>>) -> ApiResult<Vec<JobSummary>> {
    Ok(Json(s.app().jobs.list().iter().map(JobSummary::from).collect()))
}

async fn get_job(State(s): State<Arc<Scheduler>>, Path(id): Path<String>) -> ApiResult<Job> {
    s.app()
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("job {id} not found")))
}

async fn cancel_job(State(s): State<Arc<Scheduler>>, Path(id): Path<String>) -> ApiResult<Job> {
    Ok(Json(s.cancel(&id).await?))
}

#[derive(Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct SamplePage {
    pub job_id: String,
    pub offset: usize,
    pub limit: usize,
    pub total: usize,
    pub items: Vec<Value>,
}

async fn samples(
    State(s): State<Arc<Scheduler>>,
    Path(id): Path<String>,
    Query(page): Query<PageQuery>,
) -> ApiResult<SamplePage> {
    let job = s
        .app()
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("job {id} not found")))?;
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let lines: Vec<String> = match s.sample_file(&job) {
        Some(path) if path.exists() => tokio::fs::read_to_string(&path)
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect(),
        Some(_) => Vec::new(),
        None => return Err(ApiError::BadRequest(format!("{} jobs have no samples", job.kind.as_str()))),
    };
    let items = lines
        .iter()
        .skip(offset)
        .take(limit)
        .map(|l| serde_json::from_str(l).map_err(|e| ApiError::Internal(e.to_string())))
        .collect::<Result<Vec<Value>, _>>()?;
    Ok(Json(SamplePage {
        job_id: id,
        offset,
        limit,
        total: lines.len(),
        items,
    }))
}

#[derive(Deserialize)]
struct VerifyBody {
    job_id: String,
    #[serde(default)]
    turns: TurnSelection,
}

async fn submit_verify(
    State(s): State<Arc<Scheduler>>,
    body: Result<Json<VerifyBody>, JsonRejection>,
) -> ApiResult<Submitted> {
    let Json(body) = body?;
    let config = serde_json::to_value(VerifyJobConfig {
        job_id: body.job_id,
        turns: body.turns,
    })
    .expect("config serializes");
    let job = s.submit(JobKind::Verify, config)?;
    Ok(Json(Submitted { id: job.id }))
}

async fn submit_finetune(
    State(s): State<Arc<Scheduler>>,
    body: Result<Json<Value>, JsonRejection>,
) -> ApiResult<Submitted> {
    let Json(config) = body?;
    let job = s.submit(JobKind::Finetune, config)?;
    Ok(Json(Submitted { id: job.id }))
}
