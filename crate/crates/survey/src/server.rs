//! HTTP API consumed by the survey front end.
//!
//! | route | |
//! |---|---|
//! | `GET /api/question?participant=<token>` | next question, or `{"status": "complete"}` |
//! | `POST /api/response` | store one answer; `201 {"id"}`, `422 {"error", "field"}` |
//! | `GET /api/stats/choices` | role shares after bot filtering |
//! | `GET /api/stats/properties` | property shares per click rank |
//! | `GET /api/stats/eta` | η distribution against model heatmaps |
//! | `GET /images/{id}` | image bytes by opaque id |
//!
//! Any other path falls through to the static UI directory when one is set.

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{ConnectInfo, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use legible_core::legibility::Heatmap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::SurveyError;
use crate::question::SurveyQuestion;
use crate::session::{participant_key, Next, Sessions, QUESTIONS_PER_PARTICIPANT};
use crate::stats::{self, BotFilter, EtaDenominator};
use crate::store::{validate, ResponseStore, Submission};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub questions_per_participant: usize,
    /// Panorama rotation period advertised to the client.
    pub rotation_ms: u64,
    pub click_radius: f64,
    pub eta_denominator: EtaDenominator,
    pub bot_filter: BotFilter,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            questions_per_participant: QUESTIONS_PER_PARTICIPANT,
            rotation_ms: 10_000,
            click_radius: stats::DEFAULT_RADIUS,
            eta_denominator: EtaDenominator::default(),
            bot_filter: BotFilter::default(),
        }
    }
}

pub struct AppState {
    pool: Vec<SurveyQuestion>,
    sessions: Mutex<Sessions>,
    store: Mutex<ResponseStore>,
    images: HashMap<String, PathBuf>,
    /// Model heatmaps keyed by control image id.
    heatmaps: HashMap<String, Heatmap>,
    config: ServerConfig,
    ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        pool: Vec<SurveyQuestion>,
        store: ResponseStore,
        heatmaps: HashMap<String, Heatmap>,
        config: ServerConfig,
        ui_dir: Option<PathBuf>,
    ) -> Arc<Self> {
        let mut images = HashMap::new();
        for q in &pool {
            for m in [&q.panorama, &q.control].into_iter().chain(q.choices.iter().map(|c| &c.image)) {
                images.insert(m.id(), m.path.clone());
            }
        }
        Arc::new(Self {
            sessions: Mutex::new(Sessions::new(pool.len(), config.questions_per_participant)),
            pool,
            store: Mutex::new(store),
            images,
            heatmaps,
            config,
            ui_dir,
        })
    }

    pub fn pool(&self) -> &[SurveyQuestion] {
        &self.pool
    }

    pub fn response_count(&self) -> usize {
        self.store.lock().unwrap().len()
    }
}

/// Client IP from the connection, or `"unknown"` when the router runs
/// without connect info.
pub struct PeerAddr(pub String);

impl<S: Send + Sync> FromRequestParts<S> for PeerAddr {
    type Rejection = Infallible;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        Ok(PeerAddr(
            parts
                .extensions
                .get::<ConnectInfo<SocketAddr>>()
                .map(|c| c.0.ip().to_string())
                .unwrap_or_else(|| "unknown".into()),
        ))
    }
}

struct ApiError(SurveyError);

impl From<SurveyError> for ApiError {
    fn from(e: SurveyError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self.0 {
            SurveyError::Validation { field, message } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": message, "field": field })),
            )
                .into_response(),
            other => {
                log::error!("request failed: {other}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": other.to_string() }))).into_response()
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn image_url(id: &str) -> String {
    format!("/images/{id}")
}

async fn question(
    State(state): State<Arc<AppState>>,
    PeerAddr(peer): PeerAddr,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<serde_json::Value>> {
    let token = params
        .get("participant")
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| SurveyError::invalid("participant", "query parameter is required"))?;
    let key = participant_key(&peer, token);
    let mut sessions = state.sessions.lock().unwrap();
    Ok(Json(match sessions.next_question(&key, &state.pool) {
        Next::Complete => json!({ "status": "complete" }),
        Next::Question { question: q, index } => {
            let choices: Vec<_> = q
                .choices
                .iter()
                .map(|c| {
                    let id = c.image.id();
                    json!({ "image_id": id, "url": image_url(&id) })
                })
                .collect();
            json!({
                "status": "question",
                "question_id": q.id,
                "index": index,
                "total": state.config.questions_per_participant.min(state.pool.len()),
                "rotation_ms": state.config.rotation_ms,
                "panorama_url": image_url(&q.panorama.id()),
                "control_url": image_url(&q.control.id()),
                "control_size": [q.control.width, q.control.height],
                "choices": choices,
            })
        }
    }))
}

async fn response(
    State(state): State<Arc<AppState>>,
    PeerAddr(peer): PeerAddr,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let sub: Submission =
        serde_json::from_slice(&body).map_err(|e| SurveyError::invalid("body", e.to_string()))?;
    if sub.participant.trim().is_empty() {
        return Err(SurveyError::invalid("participant", "must not be empty").into());
    }
    let qidx = state
        .pool
        .iter()
        .position(|q| q.id == sub.question_id)
        .ok_or_else(|| SurveyError::invalid("question_id", "unknown question"))?;
    let key = participant_key(&peer, &sub.participant);
    if !state.sessions.lock().unwrap().was_served(&key, qidx) {
        return Err(SurveyError::invalid("question_id", "question was not served to this participant").into());
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let record = validate(&sub, &state.pool[qidx], &key, now)?;
    let (id, fresh) = state.store.lock().unwrap().insert(record)?;
    log::info!("response id={id} question={} fresh={fresh}", sub.question_id);
    let status = if fresh { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(json!({ "id": id }))))
}

async fn stats_choices(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let records = state.store.lock().unwrap().records().to_vec();
    let filtered = stats::filter_bots(&records, &state.config.bot_filter);
    Json(json!({
        "rejected": filtered.rejected.len(),
        "choices": stats::aggregate_choices(&filtered.kept),
    }))
}

async fn stats_properties(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let records = state.store.lock().unwrap().records().to_vec();
    let filtered = stats::filter_bots(&records, &state.config.bot_filter);
    Json(json!(stats::property_tally(&filtered.kept)))
}

async fn stats_eta(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let records = state.store.lock().unwrap().records().to_vec();
    let filtered = stats::filter_bots(&records, &state.config.bot_filter);
    let result = stats::eta_distribution(
        &filtered.kept,
        &state.heatmaps,
        state.config.click_radius,
        state.config.eta_denominator,
    )?;
    Ok(Json(json!(result)))
}

async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(path) = state.images.get(&id) else {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "unknown image" }))).into_response();
    };
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(e) => {
            log::error!("image={id} path={} error={e}", path.display());
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui = state.ui_dir.clone();
    let app = Router::new()
        .route("/api/question", get(question))
        .route("/api/response", post(response))
        .route("/api/stats/choices", get(stats_choices))
        .route("/api/stats/properties", get(stats_properties))
        .route("/api/stats/eta", get(stats_eta))
        .route("/images/{id}", get(image))
        .with_state(state);
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves until `shutdown` resolves, then drains open connections.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("survey listening addr={addr} questions={}", state.pool.len());
    }
    axum::serve(listener, router(state).into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(shutdown)
        .await
}
