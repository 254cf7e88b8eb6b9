//! The `/v1` JSON API over [`ScaffoldService`].
//!
//! Session routes need `Authorization: Bearer <token>` with the token from
//! `POST /v1/sessions`. The analytics route needs the admin token when one
//! is configured. Service calls can block on test runs or the provider, so
//! they run on the blocking pool.

use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parsons_core::analytics::{Metric, StatsError};
use parsons_core::exec_harness::ExecError;
use parsons_core::puzzle_engine::{EngineError, Move};
use parsons_core::solution_forge::ForgeError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service::{NewSession, ScaffoldService, ServiceError};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<ScaffoldService>,
    pub admin_token: Option<String>,
}

pub fn router(state: AppState) -> Router {
    let question = "/v1/sessions/{session_id}/problems/{problem_id}";
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{session_id}", get(get_session))
        .route("/v1/problems", get(list_problems))
        .route("/v1/problems/{problem_id}", get(get_problem))
        .route(&format!("{question}/open"), post(open_question))
        .route(&format!("{question}/run"), post(run))
        .route(&format!("{question}/submit"), post(submit))
        .route(&format!("{question}/help"), post(help))
        .route(&format!("{question}/regenerate"), post(regenerate))
        .route(&format!("{question}/puzzle/move"), post(puzzle_move))
        .route(&format!("{question}/puzzle/check"), post(puzzle_check))
        .route(&format!("{question}/puzzle/help-me"), post(puzzle_help_me))
        .route(&format!("{question}/puzzle/copy"), post(puzzle_copy))
        .route("/v1/analytics/report", get(report))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            ServiceError::UnknownSession(_) => (S::NOT_FOUND, "unknown_session"),
            ServiceError::UnknownProblem(_) => (S::NOT_FOUND, "unknown_problem"),
            ServiceError::DuplicateSession(_) => (S::CONFLICT, "duplicate_session"),
            ServiceError::WrongCondition(_) => (S::CONFLICT, "wrong_condition"),
            ServiceError::NoActivePuzzle(_) => (S::CONFLICT, "no_active_puzzle"),
            ServiceError::NoSolutionYet(_) => (S::CONFLICT, "no_solution_yet"),
            ServiceError::Unauthorized => (S::UNAUTHORIZED, "unauthorized"),
            ServiceError::Engine(engine) => match engine {
                EngineError::UnknownBlock(_) => (S::UNPROCESSABLE_ENTITY, "unknown_block"),
                EngineError::PositionOutOfRange { .. } => (S::UNPROCESSABLE_ENTITY, "position_out_of_range"),
                EngineError::PuzzleAlreadySolved => (S::CONFLICT, "puzzle_already_solved"),
                EngineError::TooFewAttempts { .. } => (S::CONFLICT, "too_few_attempts"),
                EngineError::NothingToAdapt => (S::CONFLICT, "nothing_to_adapt"),
                EngineError::NotSolved => (S::CONFLICT, "not_solved"),
            },
            ServiceError::Forge(ForgeError::ProviderUnavailable(_)) => (S::SERVICE_UNAVAILABLE, "provider_unavailable"),
            ServiceError::Forge(ForgeError::NoVerifiedSolution) => (S::BAD_GATEWAY, "no_verified_solution"),
            ServiceError::Forge(_) => (S::INTERNAL_SERVER_ERROR, "forge_failed"),
            ServiceError::Exec(ExecError::MalformedTest(_)) => (S::INTERNAL_SERVER_ERROR, "malformed_test"),
            ServiceError::Exec(_) => (S::INTERNAL_SERVER_ERROR, "runner_failed"),
            ServiceError::Stats(StatsError::MissingCondition(_)) => (S::CONFLICT, "missing_condition"),
            ServiceError::Stats(_) => (S::CONFLICT, "insufficient_data"),
            ServiceError::Bank(_) => (S::BAD_REQUEST, "bad_problem_bank"),
            _ => (S::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        ApiError::new(status, code, e.to_string())
    }
}

/// Bearer token from the `Authorization` header.
pub struct Bearer(pub String);

fn bearer_token(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
}

impl<S: Send + Sync> FromRequestParts<S> for Bearer {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        bearer_token(&parts.headers)
            .map(|t| Bearer(t.to_string()))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing bearer token"))
    }
}

/// Runs a blocking service call off the async workers.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ScaffoldService) -> Result<T, ServiceError> + Send + 'static,
{
    let service = state.service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

/// Authorizes, then runs a blocking call for the session.
async fn authed<T, F>(state: &AppState, session_id: String, token: Bearer, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ScaffoldService, &str) -> Result<T, ServiceError> + Send + 'static,
{
    blocking(state, move |svc| {
        svc.authorize(&session_id, &token.0)?;
        f(svc, &session_id)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionBody {
    pub student_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn create_session(State(state): State<AppState>, Json(body): Json<CreateSessionBody>) -> Result<Response, ApiError> {
    if body.student_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "student_id must not be empty"));
    }
    let ticket = blocking(&state, move |svc| {
        svc.create_session(NewSession {
            student_id: body.student_id,
            seed: body.seed,
            condition: None,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(ticket)).into_response())
}

async fn get_session(
    State(state): State<AppState>,
    Path(session_id): Path<String>,
    token: Bearer,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, session_id, token, |svc, sid| svc.snapshot(sid)).await
}

async fn list_problems(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.service.problems())
}

async fn get_problem(State(state): State<AppState>, Path(problem_id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.service.problem(&problem_id)?))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CodeBody {
    #[serde(default)]
    pub code: String,
}

type QuestionPath = Path<(String, String)>;

async fn open_question(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.open_question(sid, &pid)).await
}

async fn run(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
    Json(body): Json<CodeBody>,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.save_and_run(sid, &pid, &body.code)).await
}

async fn submit(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
    Json(body): Json<CodeBody>,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.submit(sid, &pid, &body.code)).await
}

async fn help(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
    Json(body): Json<CodeBody>,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.request_help(sid, &pid, &body.code)).await
}

async fn regenerate(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
    Json(body): Json<CodeBody>,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.regenerate(sid, &pid, &body.code)).await
}

async fn puzzle_move(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
    Json(m): Json<Move>,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.puzzle_move(sid, &pid, &m)).await
}

async fn puzzle_check(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.puzzle_check(sid, &pid)).await
}

async fn puzzle_help_me(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| svc.puzzle_help_me(sid, &pid)).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CopyResponse {
    pub text: String,
}

async fn puzzle_copy(
    State(state): State<AppState>,
    Path((sid, pid)): QuestionPath,
    token: Bearer,
) -> Result<impl IntoResponse, ApiError> {
    authed(&state, sid, token, move |svc, sid| {
        svc.copy_answer(sid, &pid).map(|text| CopyResponse { text })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default)]
    pub format: Option<String>,
}

fn default_metric() -> String {
    "practice_time".into()
}

async fn report(
    State(state): State<AppState>,
    Query(q): Query<ReportQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    if let Some(admin) = &state.admin_token {
        if bearer_token(&headers) != Some(admin.as_str()) {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "admin token required"));
        }
    }
    let metric: Metric = q
        .metric
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_metric", e))?;
    let report = blocking(&state, move |svc| svc.report(metric)).await?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("text") => Ok((
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            report.render_table(),
        )
            .into_response()),
        Some(other) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_format",
            format!("unknown format `{other}`, expected json or text"),
        )),
    }
}
