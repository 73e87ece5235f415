//! JSON API under `/api/` for blinded pairwise caption judging and cloze
//! review. Annotators authenticate with `Authorization: Bearer <token>`.
//!
//! | method | path                           | body                                   |
//! |--------|--------------------------------|----------------------------------------|
//! | GET    | `/api/next-pair`               |                                        |
//! | POST   | `/api/judgment`                | `{pair_token, outcome}`                |
//! | GET    | `/api/leaderboard`             |                                        |
//! | GET    | `/api/review-queue`            |                                        |
//! | POST   | `/api/review-queue`            | `{item_id, decision, ..., revision?}`  |
//! | POST   | `/api/review-queue/items`      | a cloze passage                        |
//! | GET    | `/api/stats`                   |                                        |

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use omnicap_core::arena::{ArenaError, ArenaService, Outcome};
use omnicap_core::cloze::{ClozePassage, ReviewDecision, ReviewError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl From<ArenaError> for ApiError {
    fn from(e: ArenaError) -> Self {
        let (status, code) = match &e {
            ArenaError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            ArenaError::Forbidden => (StatusCode::FORBIDDEN, "forbidden"),
            ArenaError::UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
            ArenaError::DuplicateJudgment(_) => (StatusCode::CONFLICT, "duplicate_judgment"),
            ArenaError::NotEnoughModels => (StatusCode::SERVICE_UNAVAILABLE, "no_pairs_available"),
            ArenaError::Review(r) => match r {
                ReviewError::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
                ReviewError::DuplicateItem(_) => (StatusCode::CONFLICT, "duplicate_item"),
                ReviewError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
                ReviewError::StaleRevision { .. } => (StatusCode::CONFLICT, "stale_revision"),
                ReviewError::InvalidPatch(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_patch"),
                ReviewError::Audit(_) => (StatusCode::INTERNAL_SERVER_ERROR, "audit_log"),
            },
            ArenaError::Elo(_) | ArenaError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn annotator(svc: &ArenaService, headers: &HeaderMap) -> Result<String, ApiError> {
    Ok(svc.authenticate(bearer(headers))?)
}

/// Any body that is not valid JSON of the expected shape is a 422.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed_body", e.to_string()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgmentBody {
    pair_token: String,
    outcome: Outcome,
}

/// Receipt for a judgment; carries no model names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct JudgmentAck {
    pub match_id: String,
    pub sequence_no: u64,
}

#[derive(Debug, Deserialize)]
struct ReviewBody {
    item_id: String,
    #[serde(flatten)]
    decision: ReviewDecision,
    #[serde(default)]
    revision: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Submitted {
    pub item_id: String,
}

async fn next_pair(State(svc): State<Arc<ArenaService>>, headers: HeaderMap) -> ApiResult<omnicap_core::arena::PairView> {
    let who = annotator(&svc, &headers)?;
    Ok(Json(svc.next_pair(&who)?))
}

async fn judgment(State(svc): State<Arc<ArenaService>>, headers: HeaderMap, body: Bytes) -> ApiResult<JudgmentAck> {
    let who = annotator(&svc, &headers)?;
    let body: JudgmentBody = parse(&body)?;
    // The log append syncs to disk; keep it off the async workers.
    let rec = tokio::task::spawn_blocking(move || svc.submit_judgment(&who, &body.pair_token, body.outcome))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(JudgmentAck { match_id: rec.match_id, sequence_no: rec.sequence_no }))
}

async fn leaderboard(
    State(svc): State<Arc<ArenaService>>,
    headers: HeaderMap,
) -> ApiResult<Vec<omnicap_core::arena::LeaderboardRow>> {
    annotator(&svc, &headers)?;
    Ok(Json(svc.leaderboard()))
}

async fn review_queue(
    State(svc): State<Arc<ArenaService>>,
    headers: HeaderMap,
) -> ApiResult<Vec<omnicap_core::cloze::ReviewItem>> {
    annotator(&svc, &headers)?;
    Ok(Json(svc.pending_reviews()))
}

async fn review_decide(
    State(svc): State<Arc<ArenaService>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<omnicap_core::cloze::ReviewItem> {
    let who = annotator(&svc, &headers)?;
    let body: ReviewBody = parse(&body)?;
    Ok(Json(svc.decide_review(&body.item_id, &who, body.decision, body.revision)?))
}

async fn review_submit(State(svc): State<Arc<ArenaService>>, headers: HeaderMap, body: Bytes) -> ApiResult<Submitted> {
    let who = annotator(&svc, &headers)?;
    let passage: ClozePassage = parse(&body)?;
    Ok(Json(Submitted { item_id: svc.submit_review(passage, &who)? }))
}

async fn stats(State(svc): State<Arc<ArenaService>>, headers: HeaderMap) -> ApiResult<omnicap_core::arena::ArenaStats> {
    annotator(&svc, &headers)?;
    Ok(Json(svc.stats()))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(svc: Arc<ArenaService>) -> Router {
    let api = Router::new()
        .route("/next-pair", get(next_pair))
        .route("/judgment", post(judgment))
        .route("/leaderboard", get(leaderboard))
        .route("/review-queue", get(review_queue).post(review_decide))
        .route("/review-queue/items", post(review_submit))
        .route("/stats", get(stats))
        .fallback(not_found);
    Router::new().nest("/api", api).with_state(svc)
}

/// [`router`] plus a static UI bundle served from `dir` at `/`.
pub fn router_with_static(svc: Arc<ArenaService>, dir: &Path) -> Router {
    router(svc).fallback_service(tower_http::services::ServeDir::new(dir))
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
