//! Session HTTP API.
//!
//! ```text
//! POST /sessions                   {config overrides}          -> {id, config}
//! GET  /sessions/{id}                                          -> {id, history, config, created_at, has_trace}
//! POST /sessions/{id}/messages     {text, ses?, trace?}        -> {reply, trace?, candidates, history_len}
//! GET  /sessions/{id}/trace                                    -> SesTrace
//! GET  /healthz                                                -> {status}
//! ```
//!
//! Errors are `{error, retryable}` with 400 (bad input), 404 (unknown
//! session or no trace) or 502 (model backend failure).

mod events;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::Mutex;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use simrec_core::config::config_from_json_overrides;
use simrec_core::parallel::Executor;
use simrec_core::prompt::PromptSet;
use simrec_core::ses::{ses_select, SesTrace};
use simrec_core::{Agents, Error, RunConfig, RunContext, Role, Transcript};

pub use events::{Event, EventLog};

#[derive(Clone)]
pub struct ServiceConfig {
    pub base: RunConfig,
    pub prompts: PromptSet,
    pub agents: Agents,
    /// Idle time after which a session is dropped.
    pub ttl: Duration,
    pub event_log: Option<PathBuf>,
    /// Directory served at `/` (the web UI build), if any.
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(base: RunConfig, prompts: PromptSet, agents: Agents) -> Self {
        Self {
            base,
            prompts,
            agents,
            ttl: Duration::from_secs(3600),
            event_log: None,
            static_dir: None,
            cors_origin: None,
        }
    }
}

pub struct Session {
    pub id: String,
    pub history: Transcript,
    pub config: RunConfig,
    pub created_at: u64,
    pub last_trace: Option<SesTrace>,
}

struct Slot {
    session: Mutex<Session>,
    last_active: StdMutex<Instant>,
}

impl Slot {
    fn touch(&self) {
        *self.last_active.lock().expect("clock lock") = Instant::now();
    }

    fn idle(&self) -> Duration {
        self.last_active.lock().expect("clock lock").elapsed()
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    cfg: ServiceConfig,
    exec: Executor,
    sessions: StdMutex<HashMap<String, Arc<Slot>>>,
    log: Option<EventLog>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// 128 random bits, hex encoded.
pub fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl AppState {
    /// Builds the state, replaying the event log when one is configured.
    pub fn new(cfg: ServiceConfig) -> std::io::Result<Self> {
        let exec = Executor::new(cfg.base.concurrency_limit);
        let mut sessions = HashMap::new();
        let log = match &cfg.event_log {
            Some(path) => {
                let (log, restored) = EventLog::open(path)?;
                for s in restored {
                    sessions.insert(
                        s.id.clone(),
                        Arc::new(Slot { session: Mutex::new(s), last_active: StdMutex::new(Instant::now()) }),
                    );
                }
                Some(log)
            }
            None => None,
        };
        Ok(Self { inner: Arc::new(Inner { cfg, exec, sessions: StdMutex::new(sessions), log }) })
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session map").len()
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        let mut map = self.inner.sessions.lock().expect("session map");
        let slot = map.get(id)?.clone();
        if slot.idle() > self.inner.cfg.ttl {
            map.remove(id);
            drop(map);
            self.record(&Event::Evicted { id: id.to_string() });
            return None;
        }
        slot.touch();
        Some(slot)
    }

    /// Drops sessions idle for longer than the TTL. Returns how many went.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.inner.cfg.ttl;
        let gone: Vec<String> = {
            let mut map = self.inner.sessions.lock().expect("session map");
            let ids: Vec<String> = map.iter().filter(|(_, s)| s.idle() > ttl).map(|(k, _)| k.clone()).collect();
            for id in &ids {
                map.remove(id);
            }
            ids
        };
        for id in &gone {
            self.record(&Event::Evicted { id: id.clone() });
        }
        gone.len()
    }

    fn record(&self, event: &Event) {
        if let Some(log) = &self.inner.log {
            if let Err(e) = log.append(event) {
                tracing::error!(error = %e, "event log write failed");
            }
        }
    }

    fn context(&self, config: RunConfig) -> RunContext {
        RunContext {
            config,
            prompts: self.inner.cfg.prompts.clone(),
            agents: self.inner.cfg.agents.clone(),
            exec: self.inner.exec.clone(),
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
    retryable: bool,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), retryable: false }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn from_pipeline(e: Error) -> Self {
        let upstream = matches!(
            e,
            Error::Backend { .. }
                | Error::AllCandidatesFailed(_)
                | Error::EmptyProfile
                | Error::EmptyVotes
                | Error::NoScoreFound
        );
        Self {
            status: if upstream { StatusCode::BAD_GATEWAY } else { StatusCode::INTERNAL_SERVER_ERROR },
            retryable: e.is_retryable(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "retryable": self.retryable}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub config: RunConfig,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<CreatedSession> {
    let parsed = if body.iter().all(u8::is_ascii_whitespace) {
        Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let overrides = match parsed {
        Value::Null => Map::new(),
        Value::Object(m) => m,
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "body must be a JSON object of config overrides")),
    };
    let config = config_from_json_overrides(&state.inner.cfg.base, &overrides)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = new_session_id();
    let session = Session {
        id: id.clone(),
        history: Transcript::new(),
        config: config.clone(),
        created_at: now_unix(),
        last_trace: None,
    };
    state.record(&Event::Created { id: id.clone(), config: config.clone(), created_at: session.created_at });
    state.inner.sessions.lock().expect("session map").insert(
        id.clone(),
        Arc::new(Slot { session: Mutex::new(session), last_active: StdMutex::new(Instant::now()) }),
    );
    tracing::info!(%id, "session created");
    Ok(Json(CreatedSession { id, config }))
}

#[derive(Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub history: Transcript,
    pub config: RunConfig,
    pub created_at: u64,
    pub has_trace: bool,
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let slot = state.slot(&id).ok_or_else(|| ApiError::not_found("unknown session"))?;
    let s = slot.session.lock().await;
    Ok(Json(SessionView {
        id: s.id.clone(),
        history: s.history.clone(),
        config: s.config.clone(),
        created_at: s.created_at,
        has_trace: s.last_trace.is_some(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub ses: bool,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SesTrace>,
    /// Root candidates considered; 1 without search.
    pub candidates: usize,
    pub history_len: usize,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> ApiResult<MessageReply> {
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "text must not be empty"));
    }
    let slot = state.slot(&id).ok_or_else(|| ApiError::not_found("unknown session"))?;
    // held until the turn is committed, so posts to one session run one at a time
    let mut session = slot.session.lock().await;
    let mut history = session.history.clone();
    history
        .push_turn(Role::User, text.clone())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;

    let ctx = state.context(session.config.clone());
    let use_ses = body.ses;
    let h = history.clone();
    let outcome = tokio::task::spawn_blocking(move || -> Result<(String, Option<SesTrace>), Error> {
        if use_ses {
            let (reply, trace) = ses_select(&ctx, &h, ctx.config.ses_start_from_last)?;
            Ok((reply, Some(trace)))
        } else {
            let t = ctx.agents.recommender.default_temperature();
            Ok((ctx.recommend(&h, t, 0)?, None))
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(ApiError::from_pipeline)?;
    let (reply, trace) = outcome;

    history
        .push_turn(Role::Recommender, reply.clone())
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    session.history = history;
    session.last_trace = trace.clone();
    state.record(&Event::Turn { id: id.clone(), user: text, reply: reply.clone(), ses: use_ses });
    slot.touch();
    Ok(Json(MessageReply {
        candidates: trace.as_ref().map_or(1, |t| t.root_candidates.len()),
        history_len: session.history.len(),
        trace: if body.trace { trace } else { None },
        reply,
    }))
}

async fn get_trace(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SesTrace> {
    let slot = state.slot(&id).ok_or_else(|| ApiError::not_found("unknown session"))?;
    let s = slot.session.lock().await;
    s.last_trace.clone().map(Json).ok_or_else(|| ApiError::not_found("no trace for the last reply"))
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "sessions": state.session_count()}))
}

pub fn router(state: AppState) -> Router {
    let cors = match &state.inner.cfg.cors_origin {
        Some(origin) => match origin.parse::<HeaderValue>() {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => {
                tracing::warn!(%origin, "invalid CORS origin; allowing any");
                CorsLayer::new().allow_origin(Any)
            }
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/trace", get(get_trace))
        .route("/healthz", get(healthz));
    let app = match &state.inner.cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors).with_state(state)
}

/// Serves until the process is stopped, sweeping idle sessions periodically.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let sweep = state.clone();
    let period = (state.inner.cfg.ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweep.evict_idle();
            if n > 0 {
                tracing::info!(evicted = n, "dropped idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
