//! Shared fixtures and reference implementations for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use groundintent::config::AppConfig;
use groundintent::disambiguation::ConflictWhitelist;
use groundintent::pipeline::PipelineDeps;
use groundintent::reasoner::{
    EngineError, EngineRequest, EngineResponse, ReasoningEngine, SearchSnippet, SearchTool, ToolError,
};
use groundintent::retrieval::{Encoder, SemanticIndex};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Everything in these tests must run without touching the network.
pub fn offline() {
    std::env::set_var(groundintent::providers::OFFLINE_ENV, "1");
    groundintent::providers::deny_network();
}

pub fn fixture_config() -> AppConfig {
    AppConfig::load(fixtures_dir().join("config.toml")).expect("fixture config loads")
}

pub fn fixture_deps() -> PipelineDeps {
    offline();
    fixture_config().build_deps().expect("fixture deps build")
}

pub fn with_whitelist(deps: &PipelineDeps, whitelist: ConflictWhitelist) -> PipelineDeps {
    PipelineDeps {
        whitelist: Arc::new(whitelist),
        ..deps.clone()
    }
}

// Reference fuzzy scorer: full-matrix edit distance over chars and owned strings.

pub fn ref_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn ref_similarity(s: &str, t: &str) -> f64 {
    let (ls, lt) = (s.chars().count(), t.chars().count());
    if ls == 0 && lt == 0 {
        1.0
    } else {
        1.0 - ref_levenshtein(s, t) as f64 / ls.max(lt) as f64
    }
}

pub fn ref_token_set(q: &str, e: &str) -> f64 {
    let qs: HashSet<String> = q.split_whitespace().map(str::to_owned).collect();
    let es: HashSet<String> = e.split_whitespace().map(str::to_owned).collect();
    let sorted = |set: Vec<&String>| {
        let mut v: Vec<String> = set.into_iter().cloned().collect();
        v.sort();
        v
    };
    let inter = sorted(qs.intersection(&es).collect());
    let only_q = sorted(qs.difference(&es).collect());
    let only_e = sorted(es.difference(&qs).collect());
    let i = inter.join(" ");
    let a = inter.iter().chain(only_q.iter()).cloned().collect::<Vec<_>>().join(" ");
    let b = inter.iter().chain(only_e.iter()).cloned().collect::<Vec<_>>().join(" ");
    [ref_similarity(&i, &a), ref_similarity(&i, &b), ref_similarity(&a, &b)]
        .into_iter()
        .fold(f64::MIN, f64::max)
}

pub fn ref_partial_ratio(q: &str, e: &str) -> f64 {
    let (s, l) = if q.chars().count() <= e.chars().count() { (q, e) } else { (e, q) };
    let sl = s.chars().count();
    let lc: Vec<char> = l.chars().collect();
    if sl == 0 {
        return if lc.is_empty() { 1.0 } else { 0.0 };
    }
    (0..=lc.len() - sl)
        .map(|start| ref_similarity(s, &lc[start..start + sl].iter().collect::<String>()))
        .fold(0.0, f64::max)
}

pub fn ref_fuzzy(q: &str, e: &str, alpha: f64) -> f64 {
    alpha * ref_token_set(q, e) + (1.0 - alpha) * ref_partial_ratio(q, e)
}

/// Brute-force exact top-n: score every index entry, keep each entity's best,
/// full sort, truncate.
pub fn brute_force_topn(index: &SemanticIndex, encoder: &dyn Encoder, query: &str, n: usize) -> Vec<(String, f64)> {
    let raw = encoder.encode(query).expect("query encodes");
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qv: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for entry in index.entries() {
        let mut cos = 0.0;
        for i in 0..qv.len() {
            cos += qv[i] * entry.vector[i];
        }
        let cos = cos.clamp(-1.0, 1.0);
        let slot = best.entry(entry.entity_id.clone()).or_insert(f64::NEG_INFINITY);
        if cos > *slot {
            *slot = cos;
        }
    }
    let mut all: Vec<(String, f64)> = best.into_iter().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(n);
    all
}

/// Engine that asks for a search on every turn, whatever it is told.
pub struct GreedyToolEngine;

impl ReasoningEngine for GreedyToolEngine {
    fn identity(&self) -> String {
        "greedy-tools".into()
    }

    fn respond(&self, request: &EngineRequest<'_>) -> Result<EngineResponse, EngineError> {
        Ok(EngineResponse::ToolCall {
            name: "web_search".into(),
            arguments: request.query.normalized.clone(),
        })
    }
}

/// Search tool that counts the calls it receives.
#[derive(Default)]
pub struct CountingSearch {
    pub calls: AtomicUsize,
}

impl SearchTool for CountingSearch {
    fn identity(&self) -> String {
        "counting".into()
    }

    fn search(&self, query: &str, _limit: usize, _timeout: Duration) -> Result<Vec<SearchSnippet>, ToolError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(vec![SearchSnippet {
            source_url: "https://search.invalid/r".into(),
            title: query.to_string(),
            snippet: "a result".into(),
        }])
    }
}

pub fn percentile(sorted: &[Duration], p: f64) -> Duration {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Minimal HTTP/1.1 client over a fresh loopback connection.
pub async fn http_request(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> (u16, String) {
    let stream = tokio::net::TcpStream::connect(addr).await.expect("connects");
    http_on(stream, addr, method, path, body).await
}

/// Sends one request on an open connection and reads until the server closes it.
pub async fn http_on(
    mut stream: tokio::net::TcpStream,
    addr: std::net::SocketAddr,
    method: &str,
    path: &str,
    body: &str,
) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let request = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes()).await.expect("writes");
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.expect("reads");
    let text = String::from_utf8(raw).expect("utf-8 response");
    let status = text[9..12].parse().expect("status code");
    let (head, payload) = text.split_once("\r\n\r\n").expect("header terminator");
    let payload = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(payload)
    } else {
        payload.to_string()
    };
    (status, payload)
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    while let Some((size, rest)) = s.split_once("\r\n") {
        let n = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
        if n == 0 {
            break;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
    out
}

pub fn url_encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}
