//! Read-only HTTP lookup over a populated intent cache.
//!
//! Routes:
//! - `GET /intent?q=<text>`
//! - `GET /healthz`
//! - `POST /admin/reload-whitelist` and `POST /admin/reload-cache`, each with an
//!   optional JSON body `{"path": ".."}` that replaces the configured file.
//!
//! Requests read an immutable snapshot; reloads build a new snapshot and swap
//! it in atomically.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use axum::extract::{Query as QueryParams, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{normalize_text, Taxonomy, VerticalId};
use crate::config::MissPolicy;
use crate::disambiguation::{load_whitelist, resolve, ConflictWhitelist, RuleFired, WhitelistError};
use crate::pipeline::{CacheError, CacheRecord, CacheStore};

pub const SCHEMA: &str = "groundintent.service/v1";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cache: {0}")]
    Cache(#[from] CacheError),
    #[error("whitelist {path}: {source}")]
    Whitelist { path: String, source: WhitelistError },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub miss_policy: MissPolicy,
    pub default_vertical: Option<VerticalId>,
    pub cache_path: PathBuf,
    pub whitelist_path: Option<PathBuf>,
    pub taxonomy: Taxonomy,
    /// Required in `x-admin-token` for admin routes when set.
    pub admin_token: Option<String>,
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), ServeError> {
        if self.miss_policy == MissPolicy::DefaultVertical {
            match &self.default_vertical {
                Some(v) if self.taxonomy.contains(v.as_str()) => {}
                Some(v) => return Err(ServeError::Config(format!("default vertical {v:?} not in taxonomy"))),
                None => return Err(ServeError::Config("miss policy default_vertical needs a default vertical".into())),
            }
        }
        Ok(())
    }
}

struct CacheSnapshot {
    records: HashMap<String, CacheRecord>,
    pipeline_version: String,
}

impl CacheSnapshot {
    fn load(path: &PathBuf) -> Result<Self, ServeError> {
        let store = CacheStore::open_read_only(path)?;
        let pipeline_version = store.header().pipeline_version.clone();
        let records = store
            .records()?
            .into_iter()
            .filter(|r| r.pipeline_version == pipeline_version)
            .map(|r| (r.key.clone(), r))
            .collect();
        Ok(Self {
            records,
            pipeline_version,
        })
    }
}

fn load_whitelist_file(path: &Option<PathBuf>, taxonomy: &Taxonomy) -> Result<ConflictWhitelist, ServeError> {
    match path {
        None => Ok(ConflictWhitelist::empty("none")),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            load_whitelist(&text, taxonomy).map_err(|source| ServeError::Whitelist {
                path: p.display().to_string(),
                source,
            })
        }
    }
}

/// Shared state of a running service.
pub struct ServiceState {
    cache: ArcSwap<CacheSnapshot>,
    whitelist: ArcSwap<ConflictWhitelist>,
    config: ServeConfig,
    // Admin-only; never touched on the read path.
    paths: Mutex<(PathBuf, Option<PathBuf>)>,
}

impl ServiceState {
    pub fn load(config: ServeConfig) -> Result<Arc<Self>, ServeError> {
        config.validate()?;
        let cache = CacheSnapshot::load(&config.cache_path)?;
        let whitelist = load_whitelist_file(&config.whitelist_path, &config.taxonomy)?;
        Ok(Arc::new(Self {
            cache: ArcSwap::from_pointee(cache),
            whitelist: ArcSwap::from_pointee(whitelist),
            paths: Mutex::new((config.cache_path.clone(), config.whitelist_path.clone())),
            config,
        }))
    }

    pub fn health(&self) -> Health {
        let cache = self.cache.load();
        Health {
            schema: SCHEMA,
            status: "ok",
            records: cache.records.len(),
            pipeline_version: cache.pipeline_version.clone(),
            whitelist_version: self.whitelist.load().version().to_string(),
        }
    }

    /// Answers a lookup; `Err` carries the miss body under the 404 policy.
    pub fn lookup(&self, raw: &str) -> Result<IntentResponse, MissResponse> {
        let cache = self.cache.load();
        let whitelist = self.whitelist.load();
        let key = normalize_text(raw);
        if let Some(record) = cache.records.get(&key) {
            let resolved = if record.resolved.whitelist_version == whitelist.version() {
                record.resolved.clone()
            } else {
                resolve(&record.resolved.tuple, &whitelist)
            };
            return Ok(IntentResponse {
                schema: SCHEMA,
                query_key: key,
                miss: false,
                final_vertical: resolved.final_vertical.to_string(),
                primary: resolved.tuple.primary.to_string(),
                secondary: resolved.tuple.secondary.as_ref().map(ToString::to_string),
                rule_fired: Some(resolved.rule_fired),
                pipeline_version: cache.pipeline_version.clone(),
                whitelist_version: resolved.whitelist_version,
                evidence_digest: Some(record.evidence_digest.clone()),
            });
        }
        match (&self.config.miss_policy, &self.config.default_vertical) {
            (MissPolicy::DefaultVertical, Some(default)) => Ok(IntentResponse {
                schema: SCHEMA,
                query_key: key,
                miss: true,
                final_vertical: default.to_string(),
                primary: default.to_string(),
                secondary: None,
                rule_fired: None,
                pipeline_version: cache.pipeline_version.clone(),
                whitelist_version: whitelist.version().to_string(),
                evidence_digest: None,
            }),
            _ => Err(MissResponse {
                schema: SCHEMA,
                query_key: key,
                miss: true,
                error: "not_cached",
            }),
        }
    }

    pub fn reload_whitelist(&self, path: Option<PathBuf>) -> Result<String, ServeError> {
        let mut paths = self.paths.lock().map_err(|_| ServeError::Config("admin lock poisoned".into()))?;
        let target = path.or_else(|| paths.1.clone());
        let whitelist = load_whitelist_file(&target, &self.config.taxonomy)?;
        let version = whitelist.version().to_string();
        self.whitelist.store(Arc::new(whitelist));
        paths.1 = target;
        Ok(version)
    }

    pub fn reload_cache(&self, path: Option<PathBuf>) -> Result<usize, ServeError> {
        let mut paths = self.paths.lock().map_err(|_| ServeError::Config("admin lock poisoned".into()))?;
        let target = path.unwrap_or_else(|| paths.0.clone());
        let snapshot = CacheSnapshot::load(&target)?;
        let n = snapshot.records.len();
        self.cache.store(Arc::new(snapshot));
        paths.0 = target;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResponse {
    pub schema: &'static str,
    pub query_key: String,
    pub miss: bool,
    pub final_vertical: String,
    pub primary: String,
    pub secondary: Option<String>,
    pub rule_fired: Option<RuleFired>,
    pub pipeline_version: String,
    pub whitelist_version: String,
    pub evidence_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissResponse {
    pub schema: &'static str,
    pub query_key: String,
    pub miss: bool,
    pub error: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub schema: &'static str,
    pub status: &'static str,
    pub records: usize,
    pub pipeline_version: String,
    pub whitelist_version: String,
}

#[derive(Deserialize)]
struct IntentParams {
    q: Option<String>,
}

#[derive(Deserialize, Default)]
struct ReloadBody {
    path: Option<PathBuf>,
}

fn error_body(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "schema": SCHEMA, "error": message }))).into_response()
}

async fn intent(State(state): State<Arc<ServiceState>>, QueryParams(params): QueryParams<IntentParams>) -> Response {
    let Some(q) = params.q else {
        return error_body(StatusCode::BAD_REQUEST, "missing query parameter q".into());
    };
    match state.lookup(&q) {
        Ok(body) => Json(body).into_response(),
        Err(miss) => (StatusCode::NOT_FOUND, Json(miss)).into_response(),
    }
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(state.health())
}

fn authorized(state: &ServiceState, headers: &HeaderMap) -> bool {
    match &state.config.admin_token {
        None => true,
        Some(token) => headers
            .get("x-admin-token")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == token),
    }
}

fn parse_reload(body: &str) -> Result<ReloadBody, Response> {
    if body.trim().is_empty() {
        return Ok(ReloadBody::default());
    }
    serde_json::from_str(body).map_err(|e| error_body(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn reload_whitelist(State(state): State<Arc<ServiceState>>, headers: HeaderMap, body: String) -> Response {
    if !authorized(&state, &headers) {
        return error_body(StatusCode::UNAUTHORIZED, "admin token required".into());
    }
    let body = match parse_reload(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let st = Arc::clone(&state);
    match tokio::task::spawn_blocking(move || st.reload_whitelist(body.path)).await {
        Ok(Ok(version)) => Json(serde_json::json!({ "schema": SCHEMA, "whitelist_version": version })).into_response(),
        Ok(Err(e)) => error_body(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn reload_cache(State(state): State<Arc<ServiceState>>, headers: HeaderMap, body: String) -> Response {
    if !authorized(&state, &headers) {
        return error_body(StatusCode::UNAUTHORIZED, "admin token required".into());
    }
    let body = match parse_reload(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let st = Arc::clone(&state);
    match tokio::task::spawn_blocking(move || st.reload_cache(body.path)).await {
        Ok(Ok(records)) => Json(serde_json::json!({ "schema": SCHEMA, "records": records })).into_response(),
        Ok(Err(e)) => error_body(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/intent", get(intent))
        .route("/healthz", get(healthz))
        .route("/admin/reload-whitelist", post(reload_whitelist))
        .route("/admin/reload-cache", post(reload_cache))
        .with_state(state)
}

/// Serves on an already-bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServeError::Io)
}

/// Loads state, binds `config.bind` and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let bind = config.bind;
    let state = ServiceState::load(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
