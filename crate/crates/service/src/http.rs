//! Versioned JSON-over-HTTP API.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use recall_core::ingestion::parse_datetime;
use recall_core::policy::PolicyKind;
use recall_core::{CardId, Timestamp, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{parse_response, Engine, RecordRequest};
use crate::error::ServiceError;

pub const API_VERSION: &str = "v1";
pub const CLOCK_HEADER: &str = "x-clock-override";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Honor the clock-override header.
    pub test_clock: bool,
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match &self.0 {
            ServiceError::UnknownUser(_) | ServiceError::UnknownCard(_) | ServiceError::NoSession(_) => StatusCode::NOT_FOUND,
            ServiceError::OutOfOrderTimestamp { .. } | ServiceError::EmptyCandidates | ServiceError::PhaseViolation(_) => StatusCode::CONFLICT,
            ServiceError::InvalidRequest(_) | ServiceError::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        let body = json!({
            "api_version": API_VERSION,
            "error": { "code": self.0.code(), "message": self.0.to_string() },
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn envelope<T: Serialize>(status: StatusCode, payload: &T) -> ApiResult {
    let mut value = serde_json::to_value(payload).map_err(|e| ServiceError::Io(std::io::Error::other(e)))?;
    let obj = match value {
        Value::Object(ref mut m) => m,
        _ => unreachable!("payloads are structs"),
    };
    obj.insert("api_version".into(), API_VERSION.into());
    Ok((status, Json(value)).into_response())
}

fn ok<T: Serialize>(payload: &T) -> ApiResult {
    envelope(StatusCode::OK, payload)
}

fn system_now() -> Timestamp {
    Timestamp(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64))
}

fn now(state: &AppState, headers: &HeaderMap) -> Result<Timestamp, ApiError> {
    match headers.get(CLOCK_HEADER) {
        Some(v) if state.test_clock => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse::<i64>().ok())
            .map(Timestamp)
            .ok_or_else(|| ServiceError::InvalidRequest(format!("{CLOCK_HEADER} must be UTC seconds")).into()),
        _ => Ok(system_now()),
    }
}

/// Runs blocking engine work (model inference, fsync) off the async workers.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
        .map_err(ApiError)
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t).map_err(|e| ServiceError::InvalidRequest(e.body_text()).into())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::InvalidRequest(e.to_string()).into())
}

fn parse_timestamp(v: &Value) -> Result<Timestamp, ApiError> {
    let bad = || ServiceError::InvalidRequest(format!("unreadable timestamp {v}"));
    match v {
        Value::Number(n) => n.as_i64().map(Timestamp).ok_or_else(|| bad().into()),
        Value::String(s) => parse_datetime(s).ok_or_else(|| bad().into()),
        _ => Err(bad().into()),
    }
}

#[derive(Deserialize)]
struct CreateUser {
    user_id: String,
}

#[derive(Serialize)]
struct UserCreated {
    user_id: String,
    created: bool,
}

async fn create_user(State(state): State<AppState>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult {
    let req: CreateUser = parse_body(&body)?;
    let now = now(&state, &headers)?;
    let user = req.user_id.clone();
    let created = blocking(&state, move |e| e.create_user(&user, now)).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    envelope(status, &UserCreated { user_id: req.user_id, created })
}

#[derive(Deserialize)]
struct UserQuery {
    user: String,
}

#[derive(Deserialize)]
struct CardQuery {
    user: String,
    card: String,
}

#[derive(Deserialize)]
struct ScheduleQuery {
    user: String,
    deck: Option<String>,
    n: Option<usize>,
    policy: Option<String>,
}

async fn schedule(State(state): State<AppState>, headers: HeaderMap, q: Result<Query<ScheduleQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let now = now(&state, &headers)?;
    let kind: PolicyKind = q.policy.as_deref().unwrap_or("delta").parse().map_err(ServiceError::from)?;
    let s = blocking(&state, move |e| e.schedule(&q.user, q.deck.as_deref(), q.n, kind, now)).await?;
    ok(&s)
}

/// Body of a study record or a test-mode answer.
#[derive(Deserialize)]
struct AnswerBody {
    user_id: String,
    card_id: String,
    response: Value,
    #[serde(default)]
    elapsed_ms: u64,
    timestamp: Option<Value>,
    idempotency_key: Option<String>,
    answer_text: Option<String>,
}

impl AnswerBody {
    fn into_request(self, headers: &HeaderMap) -> Result<RecordRequest, ApiError> {
        let header_key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned);
        Ok(RecordRequest {
            correct: parse_response(&self.response)?,
            timestamp: self.timestamp.as_ref().map(parse_timestamp).transpose()?,
            user_id: UserId::new(self.user_id),
            card_id: CardId::new(self.card_id),
            elapsed_ms: self.elapsed_ms,
            idempotency_key: self.idempotency_key.or(header_key),
            answer_text: self.answer_text,
        })
    }
}

async fn record(State(state): State<AppState>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult {
    let req = parse_body::<AnswerBody>(&body)?.into_request(&headers)?;
    let now = now(&state, &headers)?;
    let ack = blocking(&state, move |e| e.record(&req, now)).await?;
    envelope(if ack.applied { StatusCode::CREATED } else { StatusCode::OK }, &ack)
}

async fn predict(State(state): State<AppState>, headers: HeaderMap, q: Result<Query<CardQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let now = now(&state, &headers)?;
    ok(&blocking(&state, move |e| e.predict(&q.user, &q.card, now)).await?)
}

async fn curve(State(state): State<AppState>, headers: HeaderMap, q: Result<Query<CardQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let now = now(&state, &headers)?;
    let user = q.user.clone();
    let c = blocking(&state, move |e| e.curve(&q.user, &q.card, now)).await?;
    ok(&json!({ "user_id": user, "card_id": c.card_id, "start": now, "points": c.points }))
}

async fn stats(State(state): State<AppState>, q: Result<Query<UserQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    ok(&blocking(&state, move |e| e.stats(&q.user)).await?)
}

#[derive(Deserialize)]
struct TestStartBody {
    user_id: String,
    cards: Option<Vec<CardId>>,
}

async fn test_start(State(state): State<AppState>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult {
    let req: TestStartBody = parse_body(&body)?;
    let now = now(&state, &headers)?;
    let s = blocking(&state, move |e| e.test_start(&req.user_id, req.cards, now)).await?;
    envelope(StatusCode::CREATED, &s)
}

async fn test_next(State(state): State<AppState>, headers: HeaderMap, q: Result<Query<UserQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let now = now(&state, &headers)?;
    ok(&blocking(&state, move |e| e.test_next(&q.user, now)).await?)
}

async fn test_submit(State(state): State<AppState>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult {
    let req = parse_body::<AnswerBody>(&body)?.into_request(&headers)?;
    let now = now(&state, &headers)?;
    ok(&blocking(&state, move |e| e.test_submit(&req, now)).await?)
}

async fn test_report(State(state): State<AppState>, q: Result<Query<UserQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let user = q.user.clone();
    let r = blocking(&state, move |e| e.test_report(&q.user)).await?;
    ok(&json!({ "user_id": user, "report": r }))
}

async fn health(State(state): State<AppState>) -> ApiResult {
    ok(&json!({
        "status": "ok",
        "model": state.engine.model_tag(),
        "events": state.engine.event_count(),
    }))
}

async fn fallback() -> Response {
    let body = json!({
        "api_version": API_VERSION,
        "error": { "code": "not_found", "message": "no such endpoint" },
    });
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/users", post(create_user))
        .route("/api/v1/schedule", get(schedule))
        .route("/api/v1/record", post(record))
        .route("/api/v1/predict", get(predict))
        .route("/api/v1/curve", get(curve))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/test/start", post(test_start))
        .route("/api/v1/test/next", get(test_next))
        .route("/api/v1/test/submit", post(test_submit))
        .route("/api/v1/test/report", get(test_report))
        .fallback(fallback)
        .with_state(state)
}
