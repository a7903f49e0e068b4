//! HTTP API over the assistant hub.
//!
//! | method | path | who |
//! |---|---|---|
//! | POST | `/v1/chat` | anyone; staff with a bearer token may reach the tweet writer |
//! | POST | `/v1/policy/ask` | anyone |
//! | GET | `/v1/health` | anyone |
//! | GET | `/v1/tweets/drafts` | staff |
//! | POST | `/v1/tweets/draft` | staff |
//! | POST | `/v1/tweets/:draft_id/review` | staff |
//!
//! Errors are `{"error": <code>, "message": <text>}`. Hub work is blocking
//! (model calls, file writes) and runs on the blocking pool.

use std::path::Path;
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use transittalk::alerts::{parse_alert_lines, AlertEvent};
use transittalk::config::Config;
use transittalk::gtfs::GtfsFeed;
use transittalk::hub::{CallerRole, FileStore, Hub, HubDeps, HubError, SystemClock};
use transittalk::policy::{ingest_policies, PolicyError};
use transittalk::tweet::{FormatMode, ReviewDecision, ReviewError};
use transittalk::vector::{HashingEmbedder, VectorStore};

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    /// `None` closes the staff endpoints.
    pub staff_token: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        let msg = e.to_string();
        match e {
            HubError::EmptyMessage => Self::new(StatusCode::BAD_REQUEST, "empty_message", msg),
            HubError::Store(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", msg),
            HubError::UnknownAlert(_) => Self::new(StatusCode::NOT_FOUND, "unknown_alert", msg),
            HubError::Forbidden => Self::new(StatusCode::FORBIDDEN, "forbidden", msg),
            HubError::Tweet(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "tweet_failed", msg),
            HubError::Review(ReviewError::NotFound(_)) => Self::new(StatusCode::NOT_FOUND, "unknown_draft", msg),
            HubError::Review(ReviewError::Conflict { .. }) => Self::new(StatusCode::CONFLICT, "already_decided", msg),
            HubError::Review(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "review_blocked", msg),
            HubError::Policy(p) => p.into(),
        }
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let msg = e.to_string();
        match e {
            PolicyError::EmptyQuery => Self::new(StatusCode::BAD_REQUEST, "empty_query", msg),
            PolicyError::EmptyStore | PolicyError::EmptyCorpus(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_policies", msg)
            }
            PolicyError::Gateway(_) => Self::new(StatusCode::BAD_GATEWAY, "gateway_unavailable", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "policy_error", msg),
        }
    }
}

fn caller(state: &AppState, headers: &HeaderMap) -> CallerRole {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match (presented, state.staff_token.as_deref()) {
        (Some(p), Some(t)) if !t.is_empty() && p == t => CallerRole::Staff,
        _ => CallerRole::Rider,
    }
}

fn require_staff(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match caller(state, headers) {
        CallerRole::Staff => Ok(()),
        CallerRole::Rider => Err(ApiError::new(StatusCode::UNAUTHORIZED, "staff_only", "a valid staff bearer token is required")),
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Deserialize)]
struct ChatBody {
    session_id: Option<String>,
    message: String,
}

async fn chat(State(state): State<AppState>, headers: HeaderMap, Json(body): Json<ChatBody>) -> Result<impl IntoResponse, ApiError> {
    let role = caller(&state, &headers);
    let hub = state.hub.clone();
    let reply = blocking(move || Ok(hub.handle_message(body.session_id.as_deref(), &body.message, role)?)).await?;
    Ok(Json(reply))
}

#[derive(Deserialize)]
struct AskBody {
    query: String,
    #[serde(default)]
    include_sources: bool,
}

async fn ask(State(state): State<AppState>, Json(body): Json<AskBody>) -> Result<impl IntoResponse, ApiError> {
    let hub = state.hub.clone();
    let answer = blocking(move || Ok(hub.ask_policy(&body.query, body.include_sources)?)).await?;
    Ok(Json(answer))
}

async fn drafts(State(state): State<AppState>, headers: HeaderMap) -> Result<impl IntoResponse, ApiError> {
    require_staff(&state, &headers)?;
    Ok(Json(json!({ "drafts": state.hub.drafts() })))
}

#[derive(Deserialize)]
struct DraftBody {
    alert_id: String,
    format_mode: FormatMode,
}

async fn create_draft(State(state): State<AppState>, headers: HeaderMap, Json(body): Json<DraftBody>) -> Result<impl IntoResponse, ApiError> {
    require_staff(&state, &headers)?;
    let hub = state.hub.clone();
    let draft = blocking(move || Ok(hub.draft_tweet(&body.alert_id, body.format_mode)?)).await?;
    Ok((StatusCode::CREATED, Json(draft)))
}

#[derive(Deserialize)]
struct ReviewBody {
    decision: ReviewDecision,
    #[serde(default)]
    note: Option<String>,
}

async fn review(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(draft_id): UrlPath<String>,
    Json(body): Json<ReviewBody>,
) -> Result<impl IntoResponse, ApiError> {
    require_staff(&state, &headers)?;
    let hub = state.hub.clone();
    let decided = blocking(move || Ok(hub.review(&draft_id, body.decision, body.note)?)).await?;
    Ok(Json(decided))
}

async fn health(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let status = state.hub.status()?;
    Ok(Json(json!({ "status": "ok", "counts": status })))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/policy/ask", post(ask))
        .route("/v1/health", get(health))
        .route("/v1/tweets/drafts", get(drafts))
        .route("/v1/tweets/draft", post(create_draft))
        .route("/v1/tweets/:draft_id/review", post(review))
        .with_state(state)
}

/// Alerts from a JSON-lines file; bad lines are logged and skipped, a
/// missing file means no alerts.
pub fn load_alerts(path: &Path) -> anyhow::Result<Vec<AlertEvent>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            tracing::warn!(path = %path.display(), "no alerts file");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let mut alerts = Vec::new();
    for (line, parsed) in parse_alert_lines(&text) {
        match parsed {
            Ok(a) => alerts.push(a),
            Err(e) => tracing::warn!(line, error = %e, "skipping alert"),
        }
    }
    Ok(alerts)
}

/// The saved policy index if there is one, otherwise a fresh index of the
/// policy directory (saved for next time).
pub fn load_policies(config: &Config) -> anyhow::Result<VectorStore> {
    let embedder = Arc::new(HashingEmbedder::new(config.retrieval.dim));
    let index = &config.paths.vector_index;
    if index.exists() {
        let store = VectorStore::load(index, embedder).with_context(|| format!("loading {}", index.display()))?;
        if store.dim() == config.retrieval.dim {
            return Ok(store);
        }
        tracing::warn!("index dimension differs from config; re-indexing");
    }
    let mut store = VectorStore::new(Arc::new(HashingEmbedder::new(config.retrieval.dim)));
    if config.paths.policies.is_dir() {
        let report = ingest_policies(&config.paths.policies, &mut store, config.chunking())?;
        tracing::info!(docs = report.docs, chunks = report.chunks, "indexed policies");
        if let Some(parent) = index.parent() {
            std::fs::create_dir_all(parent)?;
        }
        if let Err(e) = store.save(index) {
            tracing::warn!(error = %e, "could not save policy index");
        }
    } else {
        tracing::warn!(path = %config.paths.policies.display(), "no policy directory");
    }
    Ok(store)
}

pub fn build_hub(config: &Config) -> anyhow::Result<Hub> {
    let feed = GtfsFeed::load(&config.paths.gtfs).with_context(|| format!("loading GTFS from {}", config.paths.gtfs.display()))?;
    let deps = HubDeps {
        feed: Arc::new(feed),
        alerts: Arc::new(load_alerts(&config.paths.alerts)?),
        policies: Arc::new(RwLock::new(load_policies(config)?)),
        gateway: config.build_gateway()?,
        tweet_options: config.tweet_options(),
        policy_options: config.policy_options(),
    };
    let store = FileStore::open(&config.paths.store).with_context(|| format!("opening {}", config.paths.store.display()))?;
    Ok(Hub::open(deps, Arc::new(store), Arc::new(SystemClock))?)
}
