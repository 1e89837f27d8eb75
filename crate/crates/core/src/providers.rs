//! HTTP clients behind [`Encoder`], [`ReasoningEngine`] and [`SearchTool`].
//!
//! Wire contracts (all JSON over POST):
//!
//! | client  | request                                        | response                                              |
//! |---------|------------------------------------------------|-------------------------------------------------------|
//! | encoder | `{texts: [..]}`                                | `{vectors: [[..], ..]}`                               |
//! | engine  | `{model, prompt, tools: [..], tool_choice}`    | `{tool_call: {name, arguments}}` or `{content: ".."}` |
//! | search  | `{q, limit}`                                   | `{results: [{url, title, snippet}]}`                  |
//!
//! Credentials are read from the environment variable named in
//! [`ProviderConfig::credential_env`] and sent as a bearer token.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::reasoner::{
    EngineError, EngineRequest, EngineResponse, ReasoningEngine, SearchSnippet, SearchTool, ToolError, SEARCH_TOOL_NAME,
};
use crate::retrieval::{EncodeError, Encoder};

/// Environment variable that, when set to `1`, turns every non-loopback
/// request into a panic.
pub const OFFLINE_ENV: &str = "GROUNDINTENT_OFFLINE";

static OFFLINE: AtomicBool = AtomicBool::new(false);
static OFFLINE_FROM_ENV: OnceLock<bool> = OnceLock::new();

/// Forbids network access from live clients for the rest of the process.
/// Loopback addresses stay reachable for local test doubles.
pub fn deny_network() {
    OFFLINE.store(true, Ordering::SeqCst);
}

pub fn network_denied() -> bool {
    OFFLINE.load(Ordering::SeqCst)
        || *OFFLINE_FROM_ENV.get_or_init(|| std::env::var(OFFLINE_ENV).is_ok_and(|v| v == "1"))
}

fn guard(endpoint: &str) {
    if !network_denied() {
        return;
    }
    let host = endpoint
        .split("://")
        .nth(1)
        .unwrap_or(endpoint)
        .split(['/', '?'])
        .next()
        .unwrap_or("");
    let host = host.rsplit_once('@').map_or(host, |(_, h)| h);
    let host = if host.starts_with('[') {
        host.split(']').next().map(|h| &h[1..]).unwrap_or(host)
    } else {
        host.split(':').next().unwrap_or(host)
    };
    let loopback = host == "localhost" || host.parse::<std::net::IpAddr>().is_ok_and(|ip| ip.is_loopback());
    assert!(loopback, "network access attempted while offline: {endpoint}");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Model or provider identity; also the cache-versioning identity.
    pub identity: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Maximum attempts per request, including the first; only transient
    /// failures are retried.
    #[serde(default = "default_retries")]
    pub retry_count: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credential_env: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>, identity: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            identity: identity.into(),
            timeout_ms: default_timeout_ms(),
            retry_count: default_retries(),
            backoff_ms: default_backoff_ms(),
            credential_env: None,
        }
    }

    /// Delay before retry `attempt` (1-based): `backoff_ms * 2^(attempt-1)`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16)))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HttpError {
    #[error("HTTP {status}: authentication rejected")]
    Auth { status: u16 },
    #[error("HTTP 429: quota exceeded")]
    Quota,
    #[error("HTTP {status}: server error")]
    Server { status: u16 },
    #[error("HTTP {status}: request rejected: {body}")]
    Client { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
}

impl HttpError {
    fn is_transient(&self) -> bool {
        matches!(self, HttpError::Server { .. } | HttpError::Timeout | HttpError::Transport(_))
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    config: ProviderConfig,
    agent: ureq::Agent,
}

impl HttpClient {
    fn new(config: ProviderConfig, timeout: Option<Duration>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout.unwrap_or(Duration::from_millis(config.timeout_ms))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn post_once(&self, body: &Value) -> Result<Value, HttpError> {
        guard(&self.config.endpoint);
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(var) = &self.config.credential_env {
            let key = std::env::var(var).map_err(|_| HttpError::MissingCredential(var.clone()))?;
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => HttpError::Timeout,
            other => HttpError::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        match status {
            200..=299 => response
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| HttpError::Decode(e.to_string())),
            401 | 403 => Err(HttpError::Auth { status }),
            429 => Err(HttpError::Quota),
            500..=599 => Err(HttpError::Server { status }),
            _ => Err(HttpError::Client {
                status,
                body: response.body_mut().read_to_string().unwrap_or_default(),
            }),
        }
    }

    /// Posts with up to `retry_count` attempts on transient failures.
    fn post(&self, body: &Value) -> Result<Value, HttpError> {
        let attempts = self.config.retry_count.max(1);
        let mut attempt = 1;
        loop {
            match self.post_once(body) {
                Err(e) if e.is_transient() && attempt < attempts => {
                    log::warn!("{}: {e}; attempt {attempt}/{attempts}", self.config.endpoint);
                    std::thread::sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Embedding service client.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    client: HttpClient,
    dimension: usize,
}

pub fn live_encoder(config: ProviderConfig, dimension: usize) -> HttpEncoder {
    HttpEncoder {
        client: HttpClient::new(config, None),
        dimension,
    }
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

impl Encoder for HttpEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn identity(&self) -> String {
        format!("http/{}/d{}", self.client.config.identity, self.dimension)
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        let mut v = self.encode_batch(&[text])?;
        v.pop().ok_or_else(|| EncodeError::Provider("empty response".into()))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncodeError> {
        let value = self.client.post(&json!({ "texts": texts })).map_err(|e| match e {
            HttpError::Timeout | HttpError::Transport(_) => EncodeError::Transport(e.to_string()),
            other => EncodeError::Provider(other.to_string()),
        })?;
        let response: EncodeResponse =
            serde_json::from_value(value).map_err(|e| EncodeError::Provider(e.to_string()))?;
        if response.vectors.len() != texts.len() {
            return Err(EncodeError::Provider(format!(
                "{} vectors for {} texts",
                response.vectors.len(),
                texts.len()
            )));
        }
        for v in &response.vectors {
            if v.len() != self.dimension {
                return Err(EncodeError::Dimension {
                    expected: self.dimension,
                    got: v.len(),
                });
            }
        }
        Ok(response.vectors)
    }
}

/// Chat-style model client supporting one search tool.
#[derive(Debug, Clone)]
pub struct HttpEngine {
    client: HttpClient,
}

pub fn live_engine(config: ProviderConfig) -> HttpEngine {
    HttpEngine {
        client: HttpClient::new(config, None),
    }
}

#[derive(Deserialize)]
struct ToolCallBody {
    name: String,
    arguments: Value,
}

#[derive(Deserialize)]
struct EngineBody {
    #[serde(default)]
    tool_call: Option<ToolCallBody>,
    #[serde(default)]
    content: Option<String>,
}

impl HttpEngine {
    fn request_body(&self, request: &EngineRequest<'_>) -> Value {
        let tools = if request.tools.is_available() {
            json!([{
                "name": SEARCH_TOOL_NAME,
                "description": "Search the web for what a query refers to. Argument: the search string.",
                "parameters": {"type": "object", "properties": {"query": {"type": "string"}}, "required": ["query"]}
            }])
        } else {
            json!([])
        };
        json!({
            "model": self.client.config.identity,
            "prompt": request.prompt.text,
            "tools": tools,
            "tool_choice": if request.tools.is_available() { "auto" } else { "none" },
        })
    }
}

impl ReasoningEngine for HttpEngine {
    fn identity(&self) -> String {
        format!("http/{}", self.client.config.identity)
    }

    fn respond(&self, request: &EngineRequest<'_>) -> Result<EngineResponse, EngineError> {
        let value = self.client.post(&self.request_body(request)).map_err(|e| match e {
            HttpError::Auth { .. } | HttpError::MissingCredential(_) => EngineError::Auth(e.to_string()),
            HttpError::Quota => EngineError::Quota(e.to_string()),
            HttpError::Timeout => EngineError::Timeout(e.to_string()),
            HttpError::Transport(_) => EngineError::Transport(e.to_string()),
            other => EngineError::Provider(other.to_string()),
        })?;
        let body: EngineBody = serde_json::from_value(value).map_err(|e| EngineError::Provider(e.to_string()))?;
        match (body.tool_call, body.content) {
            (Some(call), _) => {
                let arguments = match call.arguments {
                    Value::String(s) => s,
                    Value::Object(o) => o.get("query").and_then(Value::as_str).unwrap_or_default().to_string(),
                    other => other.to_string(),
                };
                Ok(EngineResponse::ToolCall {
                    name: call.name,
                    arguments,
                })
            }
            (None, Some(content)) => Ok(EngineResponse::Final(content)),
            (None, None) => Err(EngineError::Provider("response has neither tool_call nor content".into())),
        }
    }
}

/// Web search service client.
#[derive(Debug, Clone)]
pub struct HttpSearch {
    config: ProviderConfig,
}

pub fn live_search(config: ProviderConfig) -> HttpSearch {
    HttpSearch { config }
}

#[derive(Deserialize)]
struct SearchBody {
    results: Vec<SearchSnippet>,
}

impl SearchTool for HttpSearch {
    fn identity(&self) -> String {
        format!("http/{}", self.config.identity)
    }

    fn search(&self, query: &str, limit: usize, timeout: Duration) -> Result<Vec<SearchSnippet>, ToolError> {
        let timeout = timeout.min(Duration::from_millis(self.config.timeout_ms));
        let client = HttpClient::new(self.config.clone(), Some(timeout));
        let value = client.post(&json!({ "q": query, "limit": limit })).map_err(|e| match e {
            HttpError::Timeout => ToolError::Timeout,
            other => ToolError::Transport(other.to_string()),
        })?;
        let body: SearchBody = serde_json::from_value(value).map_err(|e| ToolError::Transport(e.to_string()))?;
        Ok(body.results)
    }
}
