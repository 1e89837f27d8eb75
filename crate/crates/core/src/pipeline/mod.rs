//! End-to-end classification: normalize, retrieve, refine, reason, resolve;
//! and the batch driver that fills the intent cache.

mod cache;

pub use cache::{cache_get, CacheError, CacheHeader, CacheRecord, CacheStore, RecordSink};

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{EntityStore, Query, VerticalId};
use crate::disambiguation::{resolve, ConflictWhitelist, ResolvedIntent};
use crate::fuzzy::{refine, CatalogEvidence, FuzzyError};
use crate::reasoner::{
    predict_intents, ClassificationError, EvidenceBundle, PolicyContext, ReasoningEngine, SearchTool, ToolBudget,
};
use crate::retrieval::{semantic_topn, Encoder, RetrievalConfig, RetrievalError, SemanticIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgenticMode {
    /// The engine may search whenever budget remains.
    ModelDecides,
    /// Search is offered only when catalog evidence is empty.
    OnEmptyCatalog,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub catalog_grounding: bool,
    pub agentic_search: bool,
    pub dual_intent: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all(true)
    }
}

impl AblationFlags {
    pub const fn all(on: bool) -> Self {
        Self {
            catalog_grounding: on,
            agentic_search: on,
            dual_intent: on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub budget: ToolBudget,
    pub agentic_mode: AgenticMode,
    pub ablation: AblationFlags,
    /// Fallback vertical for the scripted engine; `None` keeps the ruleset's own.
    pub default_vertical: Option<VerticalId>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            budget: ToolBudget::default(),
            agentic_mode: AgenticMode::OnEmptyCatalog,
            ablation: AblationFlags::default(),
            default_vertical: None,
        }
    }
}

/// Everything a classification needs, built against one store version.
#[derive(Clone)]
pub struct PipelineDeps {
    pub store: Arc<EntityStore>,
    pub index: Arc<SemanticIndex>,
    pub encoder: Arc<dyn Encoder>,
    pub engine: Arc<dyn ReasoningEngine>,
    pub tool: Arc<dyn SearchTool>,
    pub whitelist: Arc<ConflictWhitelist>,
    pub policy: Arc<PolicyContext>,
}

impl PipelineDeps {
    /// Identifier of every input that affects a cached result.
    pub fn pipeline_version(&self, config: &PipelineConfig) -> String {
        let material = serde_json::json!({
            "config": config,
            "whitelist_version": self.whitelist.version(),
            "store_version": self.store.version().to_string(),
            "engine": self.engine.identity(),
            "encoder": self.encoder.identity(),
            "search": self.tool.identity(),
        });
        let digest = Sha256::digest(serde_json::to_vec(&material).expect("version material serializes"));
        hex::encode(&digest[..8])
    }

    pub fn cache_header(&self, config: &PipelineConfig) -> CacheHeader {
        CacheHeader::new(self.pipeline_version(config), self.store.version().to_string())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query normalizes to empty text")]
    EmptyQuery,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Integrity(#[from] FuzzyError),
    #[error(transparent)]
    Classification(#[from] ClassificationError),
}

impl PipelineError {
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::EmptyQuery => "empty_query",
            PipelineError::Retrieval(_) => "retrieval",
            PipelineError::Integrity(_) => "integrity",
            PipelineError::Classification(e) => e.kind.class(),
        }
    }

    /// Search calls issued before the failure.
    pub fn tool_calls(&self) -> usize {
        match self {
            PipelineError::Classification(e) => e.external.tool_queries.len(),
            _ => 0,
        }
    }
}

/// A resolved query with the evidence it was resolved from.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub query: Query,
    pub resolved: ResolvedIntent,
    pub evidence: EvidenceBundle,
    pub retrieval_performed: bool,
    pub tool_calls: usize,
}

impl Classification {
    pub fn to_record(&self, pipeline_version: &str) -> CacheRecord {
        CacheRecord {
            key: self.query.normalized.clone(),
            resolved: self.resolved.clone(),
            evidence_digest: self.evidence.digest(),
            pipeline_version: pipeline_version.to_string(),
            created_at: Utc::now(),
            evidence: self.evidence.clone(),
        }
    }
}

/// Classifies one raw query under the ablation flags and agentic mode in `config`.
pub fn classify_query(raw: &str, deps: &PipelineDeps, config: &PipelineConfig) -> Result<Classification, PipelineError> {
    let query = Query::new(raw);
    if query.normalized.is_empty() {
        return Err(PipelineError::EmptyQuery);
    }
    let flags = config.ablation;

    let catalog = if flags.catalog_grounding {
        let candidates = semantic_topn(&deps.index, &query, deps.encoder.as_ref(), config.retrieval.top_n)?;
        refine(&candidates, &query, &config.retrieval, &deps.store)?
    } else {
        CatalogEvidence::default()
    };

    let tools_offered = flags.agentic_search
        && match config.agentic_mode {
            AgenticMode::ModelDecides => true,
            AgenticMode::OnEmptyCatalog => catalog.is_empty(),
            AgenticMode::Off => false,
        };
    let budget = ToolBudget {
        max_tool_calls: if tools_offered { config.budget.max_tool_calls } else { 0 },
        ..config.budget
    };

    let prediction = predict_intents(
        deps.engine.as_ref(),
        &query,
        &catalog,
        &deps.policy,
        deps.store.taxonomy(),
        deps.tool.as_ref(),
        &budget,
    )?;
    let mut tuple = prediction.tuple;
    if !flags.dual_intent {
        tuple.secondary = None;
    }
    let resolved = resolve(&tuple, &deps.whitelist);
    let tool_calls = prediction.external.tool_queries.len();
    Ok(Classification {
        query,
        resolved,
        evidence: EvidenceBundle {
            catalog,
            external: prediction.external,
        },
        retrieval_performed: flags.catalog_grounding,
        tool_calls,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub query: String,
    pub error_class: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub tool_calls_issued: usize,
    pub cache_written: usize,
    pub failures: Vec<BatchFailure>,
    /// Keys not attempted because the batch aborted; empty on completion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_attempted: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("reading queries: {0}")]
    Input(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("cache write failed after {} of {} keys; rerun to resume: {source}", .partial.succeeded, .partial.total)]
    Aborted {
        partial: Box<BatchReport>,
        #[source]
        source: CacheError,
    },
}

enum Outcome {
    Written(usize),
    Unchanged(usize),
    Failed(BatchFailure, usize),
    CacheFailed(CacheError),
    Skipped,
}

/// Classifies each distinct normalized query once and writes the results.
///
/// Failed queries are reported and not cached. The report does not depend on
/// `parallelism`.
pub fn batch_run<R: BufRead>(
    queries: R,
    deps: &PipelineDeps,
    config: &PipelineConfig,
    cache: &dyn RecordSink,
    parallelism: usize,
) -> Result<BatchReport, BatchError> {
    let mut unique: BTreeMap<String, String> = BTreeMap::new();
    for line in queries.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let key = crate::catalog::normalize_text(&line);
        unique.entry(key).or_insert(line);
    }
    let jobs: Vec<(String, String)> = unique.into_iter().collect();
    let version = deps.pipeline_version(config);
    let abort = AtomicBool::new(false);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| BatchError::Pool(e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(key, raw)| {
                if abort.load(Ordering::Acquire) {
                    return Outcome::Skipped;
                }
                match classify_query(raw, deps, config) {
                    Ok(c) => {
                        let calls = c.tool_calls;
                        match cache.put(c.to_record(&version)) {
                            Ok(true) => Outcome::Written(calls),
                            Ok(false) => Outcome::Unchanged(calls),
                            Err(e) => {
                                abort.store(true, Ordering::Release);
                                Outcome::CacheFailed(e)
                            }
                        }
                    }
                    Err(e) => Outcome::Failed(
                        BatchFailure {
                            query: key.clone(),
                            error_class: e.class().to_string(),
                            message: e.to_string(),
                        },
                        e.tool_calls(),
                    ),
                }
            })
            .collect()
    });

    let mut report = BatchReport::default();
    let mut cache_error = None;
    for ((key, _), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Outcome::Written(calls) => {
                report.succeeded += 1;
                report.cache_written += 1;
                report.tool_calls_issued += calls;
            }
            Outcome::Unchanged(calls) => {
                report.succeeded += 1;
                report.tool_calls_issued += calls;
            }
            Outcome::Failed(f, calls) => {
                report.failed += 1;
                report.tool_calls_issued += calls;
                report.failures.push(f);
            }
            Outcome::CacheFailed(e) => {
                report.not_attempted.push(key.clone());
                cache_error.get_or_insert(e);
            }
            Outcome::Skipped => report.not_attempted.push(key.clone()),
        }
    }
    report.total = report.succeeded + report.failed;
    match cache_error {
        Some(source) => Err(BatchError::Aborted {
            partial: Box::new(report),
            source,
        }),
        None => Ok(report),
    }
}
