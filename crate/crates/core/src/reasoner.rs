//! Dual-intent reasoning: prompt assembly, the bounded search-tool loop, and
//! the deterministic scripted engine and fixture search tool used offline.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Query, Taxonomy, VerticalId};
use crate::fuzzy::CatalogEvidence;

pub const SEARCH_TOOL_NAME: &str = "web_search";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSnippet {
    #[serde(alias = "url")]
    pub source_url: String,
    pub title: String,
    pub snippet: String,
}

/// Web evidence gathered by the tool loop. Empty iff no search was issued.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalEvidence {
    pub tool_queries: Vec<String>,
    pub snippets: Vec<SearchSnippet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_errors: Vec<String>,
}

impl ExternalEvidence {
    pub fn is_empty(&self) -> bool {
        self.tool_queries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub catalog: CatalogEvidence,
    pub external: ExternalEvidence,
}

impl EvidenceBundle {
    /// Hex SHA-256 of the bundle's JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("evidence serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TupleError {
    #[error("unknown vertical {0:?}")]
    UnknownVertical(String),
    #[error("secondary intent equals primary ({0:?})")]
    SecondaryEqualsPrimary(String),
    #[error("malformed tuple: {0}")]
    Malformed(String),
}

/// Ordered dual-intent prediction: a primary vertical and an optional,
/// distinct secondary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentTuple {
    pub primary: VerticalId,
    #[serde(default)]
    pub secondary: Option<VerticalId>,
}

impl IntentTuple {
    pub fn new(primary: VerticalId, secondary: Option<VerticalId>, taxonomy: &Taxonomy) -> Result<Self, TupleError> {
        let tuple = Self { primary, secondary };
        tuple.validate(taxonomy)?;
        Ok(tuple)
    }

    pub fn single(primary: impl Into<VerticalId>) -> Self {
        Self {
            primary: primary.into(),
            secondary: None,
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), TupleError> {
        for v in std::iter::once(&self.primary).chain(&self.secondary) {
            if !taxonomy.contains(v.as_str()) {
                return Err(TupleError::UnknownVertical(v.to_string()));
            }
        }
        if self.secondary.as_ref() == Some(&self.primary) {
            return Err(TupleError::SecondaryEqualsPrimary(self.primary.to_string()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tuple serializes")
    }
}

impl fmt::Display for IntentTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.secondary {
            Some(s) => write!(f, "({}, {})", self.primary, s),
            None => write!(f, "({}, -)", self.primary),
        }
    }
}

/// Parses the structured answer `{"primary": .., "secondary": ..|null}`.
/// A single surrounding Markdown code fence is tolerated.
pub fn parse_tuple(text: &str, taxonomy: &Taxonomy) -> Result<IntentTuple, TupleError> {
    let mut body = text.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    let tuple: IntentTuple = serde_json::from_str(body).map_err(|e| TupleError::Malformed(e.to_string()))?;
    tuple.validate(taxonomy)?;
    Ok(tuple)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub query: String,
    pub evidence: String,
    pub tuple: IntentTuple,
}

/// Strategic rules and few-shot examples injected into every prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyContext {
    #[serde(default)]
    pub strategic_rules: Vec<String>,
    #[serde(default)]
    pub example_bank: Vec<Exemplar>,
}

impl PolicyContext {
    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self, PolicyError> {
        let policy: PolicyContext = serde_json::from_str(text)?;
        for (i, ex) in policy.example_bank.iter().enumerate() {
            ex.tuple.validate(taxonomy).map_err(|source| PolicyError::Exemplar { index: i, source })?;
        }
        Ok(policy)
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("example {index}: {source}")]
    Exemplar { index: usize, source: TupleError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolBudget {
    pub max_tool_calls: usize,
    pub max_snippets: usize,
    #[serde(with = "millis", rename = "per_call_timeout_ms")]
    pub per_call_timeout: Duration,
}

impl Default for ToolBudget {
    fn default() -> Self {
        Self {
            max_tool_calls: 2,
            max_snippets: 5,
            per_call_timeout: Duration::from_secs(10),
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// A rendered prompt. Sections are Markdown headings in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDocument {
    pub text: String,
}

impl PromptDocument {
    fn append_section(&mut self, title: &str, body: &str) {
        let _ = write!(self.text, "\n## {title}\n{body}\n");
    }
}

pub fn assemble_prompt(
    query: &Query,
    evidence: &EvidenceBundle,
    policy: &PolicyContext,
    taxonomy: &Taxonomy,
) -> PromptDocument {
    let mut doc = PromptDocument {
        text: "You classify marketplace search queries into business verticals.\n".to_string(),
    };

    let verticals: String = taxonomy
        .verticals()
        .iter()
        .map(|v| format!("- {}: {}\n", v.id, v.display_name))
        .collect();
    doc.append_section("Verticals", verticals.trim_end());

    if !policy.strategic_rules.is_empty() {
        let rules: Vec<String> = policy
            .strategic_rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {}", i + 1, r))
            .collect();
        doc.append_section("Strategic rules", &rules.join("\n"));
    }

    if !policy.example_bank.is_empty() {
        let examples: Vec<String> = policy
            .example_bank
            .iter()
            .map(|ex| format!("query: {} | evidence: {} | answer: {}", ex.query, ex.evidence, ex.tuple.to_json()))
            .collect();
        doc.append_section("Examples", &examples.join("\n"));
    }

    if !evidence.catalog.is_empty() {
        let lines: Vec<String> = evidence
            .catalog
            .matches
            .iter()
            .map(|m| format!("- {} | kind: {} | vertical: {} | fuzzy: {:.3}", m.name, m.kind, m.vertical, m.fuzzy))
            .collect();
        doc.append_section("Catalog evidence", &lines.join("\n"));
    }

    if !evidence.external.is_empty() {
        let mut lines: Vec<String> = evidence
            .external
            .tool_queries
            .iter()
            .map(|q| format!("searched: {q}"))
            .collect();
        lines.extend(
            evidence
                .external
                .snippets
                .iter()
                .map(|s| format!("- {} ({}): {}", s.title, s.source_url, s.snippet)),
        );
        lines.extend(evidence.external.tool_errors.iter().map(|e| format!("tool failure: {e}")));
        doc.append_section("External search", &lines.join("\n"));
    }

    doc.append_section("Query", &query.normalized);
    doc.append_section(
        "Output format",
        "Answer with one JSON object and nothing else: \
         {\"primary\": \"<vertical id>\", \"secondary\": \"<vertical id>\" or null}. \
         The secondary vertical must differ from the primary.",
    );
    doc
}

/// What the engine is told about the search tool on this turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolStatus {
    Available { remaining: usize },
    Exhausted,
    Unavailable,
}

impl ToolStatus {
    pub fn is_available(self) -> bool {
        matches!(self, ToolStatus::Available { .. })
    }

    fn note(self) -> String {
        match self {
            ToolStatus::Available { remaining } => format!(
                "You may call `{SEARCH_TOOL_NAME}` with a search string ({remaining} call(s) remaining) \
                 if the evidence above is insufficient."
            ),
            ToolStatus::Exhausted => "The search budget is exhausted. Answer now.".to_string(),
            ToolStatus::Unavailable => "No tools are available. Answer now.".to_string(),
        }
    }
}

/// One turn of the reasoning loop as seen by an engine.
#[derive(Debug, Clone, Copy)]
pub struct EngineRequest<'a> {
    pub prompt: &'a PromptDocument,
    pub query: &'a Query,
    pub evidence: &'a EvidenceBundle,
    pub policy: &'a PolicyContext,
    pub taxonomy: &'a Taxonomy,
    pub tools: ToolStatus,
    /// Set on the single repair turn after a malformed answer.
    pub repair: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineResponse {
    ToolCall { name: String, arguments: String },
    Final(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("quota exceeded: {0}")]
    Quota(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("provider error: {0}")]
    Provider(String),
}

pub trait ReasoningEngine: Send + Sync {
    fn identity(&self) -> String;
    fn respond(&self, request: &EngineRequest<'_>) -> Result<EngineResponse, EngineError>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolError {
    #[error("search query is empty")]
    EmptyQuery,
    #[error("search timed out")]
    Timeout,
    #[error("search transport: {0}")]
    Transport(String),
}

pub trait SearchTool: Send + Sync {
    fn identity(&self) -> String;
    fn search(&self, query: &str, limit: usize, timeout: Duration) -> Result<Vec<SearchSnippet>, ToolError>;
}

/// Runs one search, dropping empty snippets and keeping at most `max_snippets`.
pub fn web_search(
    tool: &dyn SearchTool,
    query_text: &str,
    max_snippets: usize,
    timeout: Duration,
) -> Result<Vec<SearchSnippet>, ToolError> {
    if query_text.trim().is_empty() {
        return Err(ToolError::EmptyQuery);
    }
    let mut results = tool.search(query_text, max_snippets, timeout)?;
    results.retain(|s| !s.snippet.trim().is_empty());
    results.truncate(max_snippets);
    Ok(results)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassificationErrorKind {
    #[error("engine output unusable after repair: {0}")]
    Unparseable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl ClassificationErrorKind {
    /// Short stable label used in batch reports.
    pub fn class(&self) -> &'static str {
        match self {
            ClassificationErrorKind::Unparseable(_) => "unparseable",
            ClassificationErrorKind::Engine(EngineError::Auth(_)) => "auth",
            ClassificationErrorKind::Engine(EngineError::Quota(_)) => "quota",
            ClassificationErrorKind::Engine(EngineError::Timeout(_)) => "timeout",
            ClassificationErrorKind::Engine(EngineError::Transport(_)) => "transport",
            ClassificationErrorKind::Engine(EngineError::Provider(_)) => "provider",
        }
    }
}

/// A failed classification, with whatever web evidence was gathered first.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{kind}")]
pub struct ClassificationError {
    pub kind: ClassificationErrorKind,
    pub external: ExternalEvidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tuple: IntentTuple,
    pub external: ExternalEvidence,
}

const REPAIR_FORMAT: &str = "Your previous answer was not a valid JSON object of the form \
     {\"primary\": \"<vertical id>\", \"secondary\": \"<vertical id>\" or null} using only the listed \
     vertical ids, with secondary different from primary. Reply with that JSON object only.";
const REPAIR_TOOL: &str = "Tool calls are not available now. Reply with the JSON answer only.";

/// Runs the reasoning loop for one query.
///
/// The engine may answer or ask for a web search. Searches run until
/// `budget.max_tool_calls` is spent, after which the engine is told to
/// answer. One malformed answer earns a single repair turn; a second fails
/// the query.
pub fn predict_intents(
    engine: &dyn ReasoningEngine,
    query: &Query,
    catalog: &CatalogEvidence,
    policy: &PolicyContext,
    taxonomy: &Taxonomy,
    tool: &dyn SearchTool,
    budget: &ToolBudget,
) -> Result<Prediction, ClassificationError> {
    let mut bundle = EvidenceBundle {
        catalog: catalog.clone(),
        external: ExternalEvidence::default(),
    };
    let mut calls = 0;
    let mut repair: Option<&'static str> = None;
    let mut repaired = false;

    loop {
        let tools = if budget.max_tool_calls == 0 {
            ToolStatus::Unavailable
        } else if calls < budget.max_tool_calls {
            ToolStatus::Available {
                remaining: budget.max_tool_calls - calls,
            }
        } else {
            ToolStatus::Exhausted
        };
        let mut prompt = assemble_prompt(query, &bundle, policy, taxonomy);
        prompt.append_section("Tools", &tools.note());
        if let Some(note) = repair {
            prompt.append_section("Correction", note);
        }
        let request = EngineRequest {
            prompt: &prompt,
            query,
            evidence: &bundle,
            policy,
            taxonomy,
            tools,
            repair,
        };
        let response = engine.respond(&request).map_err(|e| ClassificationError {
            kind: e.into(),
            external: bundle.external.clone(),
        })?;

        let problem = match response {
            EngineResponse::ToolCall { name, arguments } if tools.is_available() && name == SEARCH_TOOL_NAME => {
                calls += 1;
                let text = arguments.trim().to_string();
                match web_search(tool, &text, budget.max_snippets, budget.per_call_timeout) {
                    Ok(snippets) => {
                        let room = budget.max_snippets.saturating_sub(bundle.external.snippets.len());
                        bundle.external.snippets.extend(snippets.into_iter().take(room));
                    }
                    Err(e) => bundle.external.tool_errors.push(format!("{text:?}: {e}")),
                }
                bundle.external.tool_queries.push(text);
                repair = None;
                continue;
            }
            EngineResponse::ToolCall { name, .. } => (REPAIR_TOOL, format!("unexpected tool call {name:?}")),
            EngineResponse::Final(text) => match parse_tuple(&text, taxonomy) {
                Ok(tuple) => {
                    return Ok(Prediction {
                        tuple,
                        external: bundle.external,
                    })
                }
                Err(e) => (REPAIR_FORMAT, e.to_string()),
            },
        };

        if repaired {
            return Err(ClassificationError {
                kind: ClassificationErrorKind::Unparseable(problem.1),
                external: bundle.external,
            });
        }
        repaired = true;
        repair = Some(problem.0);
    }
}

/// Snippet keyword mapped to an answer, for the scripted engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordRule {
    pub keyword: String,
    pub primary: VerticalId,
    #[serde(default)]
    pub secondary: Option<VerticalId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRules {
    pub default_vertical: VerticalId,
    #[serde(default = "default_margin")]
    pub secondary_margin: f64,
    #[serde(default)]
    pub keyword_rules: Vec<KeywordRule>,
}

fn default_margin() -> f64 {
    0.1
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("rules parse error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("rule references unknown vertical {0:?}")]
    UnknownVertical(String),
    #[error("keyword rule {0}: {1}")]
    Rule(usize, TupleError),
}

/// Deterministic engine standing in for a language model.
///
/// 1. With catalog evidence: primary is the top match's vertical; secondary is
///    the best match of another vertical if within `secondary_margin` fuzzy.
/// 2. With no evidence at all and tools available: search the normalized query.
/// 3. After a search: the first keyword rule found in any snippet decides.
/// 4. Otherwise the default vertical alone.
#[derive(Debug, Clone)]
pub struct ScriptedEngine {
    rules: ScriptedRules,
}

pub fn scripted_engine(rules: ScriptedRules, taxonomy: &Taxonomy) -> Result<ScriptedEngine, ScriptError> {
    if !taxonomy.contains(rules.default_vertical.as_str()) {
        return Err(ScriptError::UnknownVertical(rules.default_vertical.to_string()));
    }
    for (i, r) in rules.keyword_rules.iter().enumerate() {
        IntentTuple {
            primary: r.primary.clone(),
            secondary: r.secondary.clone(),
        }
        .validate(taxonomy)
        .map_err(|e| ScriptError::Rule(i, e))?;
    }
    Ok(ScriptedEngine { rules })
}

impl ScriptedEngine {
    pub fn rules(&self) -> &ScriptedRules {
        &self.rules
    }

    fn decide(&self, request: &EngineRequest<'_>) -> EngineResponse {
        let evidence = request.evidence;
        if let Some(top) = evidence.catalog.matches.first() {
            let secondary = evidence
                .catalog
                .matches
                .iter()
                .find(|m| m.vertical != top.vertical)
                .filter(|m| top.fuzzy - m.fuzzy <= self.rules.secondary_margin + 1e-12)
                .map(|m| m.vertical.clone());
            return final_answer(top.vertical.clone(), secondary);
        }
        if evidence.external.is_empty() && request.tools.is_available() {
            return EngineResponse::ToolCall {
                name: SEARCH_TOOL_NAME.to_string(),
                arguments: request.query.normalized.clone(),
            };
        }
        if !evidence.external.is_empty() {
            let texts: Vec<String> = evidence
                .external
                .snippets
                .iter()
                .map(|s| format!("{} {}", s.title, s.snippet).to_lowercase())
                .collect();
            let hit = self
                .rules
                .keyword_rules
                .iter()
                .find(|r| texts.iter().any(|t| t.contains(&r.keyword.to_lowercase())));
            if let Some(rule) = hit {
                return final_answer(rule.primary.clone(), rule.secondary.clone());
            }
        }
        final_answer(self.rules.default_vertical.clone(), None)
    }
}

fn final_answer(primary: VerticalId, secondary: Option<VerticalId>) -> EngineResponse {
    EngineResponse::Final(IntentTuple { primary, secondary }.to_json())
}

impl ReasoningEngine for ScriptedEngine {
    fn identity(&self) -> String {
        let bytes = serde_json::to_vec(&self.rules).expect("rules serialize");
        format!("scripted-v1/{}", &hex::encode(Sha256::digest(bytes))[..12])
    }

    fn respond(&self, request: &EngineRequest<'_>) -> Result<EngineResponse, EngineError> {
        Ok(self.decide(request))
    }
}

/// Search tool answering from a local map keyed by exact query text.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearchTool {
    results: BTreeMap<String, Vec<SearchSnippet>>,
}

impl FixtureSearchTool {
    pub fn new(results: BTreeMap<String, Vec<SearchSnippet>>) -> Self {
        Self { results }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }
}

impl SearchTool for FixtureSearchTool {
    fn identity(&self) -> String {
        let bytes = serde_json::to_vec(&self.results).expect("fixtures serialize");
        format!("fixture-search/{}", &hex::encode(Sha256::digest(bytes))[..12])
    }

    fn search(&self, query: &str, limit: usize, _timeout: Duration) -> Result<Vec<SearchSnippet>, ToolError> {
        Ok(self
            .results
            .get(query)
            .map(|r| r.iter().take(limit).cloned().collect())
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::EntityKind;
    use crate::fuzzy::FuzzyScoredMatch;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn taxonomy() -> Taxonomy {
        let ids = ["restaurant", "flower", "grocery", "dish", "alcohol", "retail_store"];
        let doc = serde_json::json!({
            "verticals": ids.iter().map(|i| serde_json::json!({"id": i, "display_name": i})).collect::<Vec<_>>()
        });
        Taxonomy::from_json(&doc.to_string()).unwrap()
    }

    fn m(id: &str, name: &str, vertical: &str, fuzzy: f64) -> FuzzyScoredMatch {
        FuzzyScoredMatch {
            entity_id: id.into(),
            surface: name.to_lowercase(),
            name: name.into(),
            kind: EntityKind::Merchant,
            vertical: vertical.into(),
            cosine: 0.5,
            fuzzy,
        }
    }

    fn rules() -> ScriptedRules {
        ScriptedRules {
            default_vertical: "restaurant".into(),
            secondary_margin: 0.1,
            keyword_rules: vec![KeywordRule {
                keyword: "brewery".into(),
                primary: "alcohol".into(),
                secondary: Some("retail_store".into()),
            }],
        }
    }

    fn fixture_tool() -> FixtureSearchTool {
        FixtureSearchTool::from_json(
            r#"{"450 north":[{"url":"https://example.test/450","title":"450 North","snippet":"Craft brewery, not a restaurant"}]}"#,
        )
        .unwrap()
    }

    fn run(
        engine: &dyn ReasoningEngine,
        q: &str,
        catalog: CatalogEvidence,
        tool: &dyn SearchTool,
        budget: ToolBudget,
    ) -> Result<Prediction, ClassificationError> {
        predict_intents(engine, &Query::new(q), &catalog, &PolicyContext::default(), &taxonomy(), tool, &budget)
    }

    #[test]
    fn tuple_validation() {
        let t = taxonomy();
        assert!(IntentTuple::new("restaurant".into(), Some("flower".into()), &t).is_ok());
        assert_eq!(
            IntentTuple::new("dish".into(), Some("dish".into()), &t),
            Err(TupleError::SecondaryEqualsPrimary("dish".into()))
        );
        assert!(matches!(IntentTuple::new("pets".into(), None, &t), Err(TupleError::UnknownVertical(_))));
    }

    #[test]
    fn parse_tuple_is_strict() {
        let t = taxonomy();
        assert_eq!(
            parse_tuple(r#"{"primary":"alcohol","secondary":null}"#, &t).unwrap(),
            IntentTuple::single("alcohol")
        );
        assert_eq!(
            parse_tuple("```json\n{\"primary\":\"dish\",\"secondary\":\"grocery\"}\n```", &t).unwrap().secondary,
            Some("grocery".into())
        );
        assert!(parse_tuple("alcohol", &t).is_err());
        assert!(parse_tuple(r#"{"primary":"alcohol","confidence":0.9}"#, &t).is_err());
    }

    #[test]
    fn scripted_single_vertical_evidence() {
        let engine = scripted_engine(rules(), &taxonomy()).unwrap();
        let catalog = CatalogEvidence {
            matches: vec![m("a1", "Hoppy Trails Brewing", "alcohol", 1.0)],
        };
        let p = run(&engine, "hoppy trails", catalog, &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple, IntentTuple::single("alcohol"));
        assert!(p.external.is_empty());
    }

    #[test]
    fn scripted_dual_intent_within_margin() {
        let engine = scripted_engine(rules(), &taxonomy()).unwrap();
        let catalog = CatalogEvidence {
            matches: vec![
                m("m1", "Wildflower Bites", "restaurant", 0.95),
                m("f1", "Wildflower Stems", "flower", 0.88),
            ],
        };
        let p = run(&engine, "wildflower", catalog, &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple.primary.as_str(), "restaurant");
        assert_eq!(p.tuple.secondary, Some("flower".into()));

        let far = CatalogEvidence {
            matches: vec![m("m1", "A", "restaurant", 0.95), m("f1", "B", "flower", 0.80)],
        };
        let p = run(&engine, "wildflower", far, &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple, IntentTuple::single("restaurant"));
    }

    #[test]
    fn cold_start_query_searches_once() {
        let engine = scripted_engine(rules(), &taxonomy()).unwrap();
        let p = run(&engine, "450 North", CatalogEvidence::default(), &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple.primary.as_str(), "alcohol");
        assert_eq!(p.tuple.secondary, Some("retail_store".into()));
        assert_eq!(p.external.tool_queries, ["450 north"]);
        assert_eq!(p.external.snippets[0].snippet, "Craft brewery, not a restaurant");
    }

    #[test]
    fn zero_budget_means_default() {
        let engine = scripted_engine(rules(), &taxonomy()).unwrap();
        let budget = ToolBudget { max_tool_calls: 0, ..Default::default() };
        let p = run(&engine, "450 north", CatalogEvidence::default(), &fixture_tool(), budget).unwrap();
        assert_eq!(p.tuple, IntentTuple::single("restaurant"));
        assert!(p.external.is_empty());
    }

    #[test]
    fn unknown_search_key_falls_back_to_default() {
        let engine = scripted_engine(rules(), &taxonomy()).unwrap();
        let p = run(&engine, "zzz", CatalogEvidence::default(), &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple, IntentTuple::single("restaurant"));
        assert_eq!(p.external.tool_queries.len(), 1);
        assert!(p.external.snippets.is_empty());
    }

    struct Recorder {
        answers: Mutex<Vec<EngineResponse>>,
        seen: Mutex<Vec<(ToolStatus, Option<String>, String)>>,
    }

    impl Recorder {
        fn new(mut answers: Vec<EngineResponse>) -> Self {
            answers.reverse();
            Self {
                answers: Mutex::new(answers),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl ReasoningEngine for Recorder {
        fn identity(&self) -> String {
            "recorder".into()
        }
        fn respond(&self, r: &EngineRequest<'_>) -> Result<EngineResponse, EngineError> {
            self.seen
                .lock()
                .unwrap()
                .push((r.tools, r.repair.map(str::to_string), r.prompt.text.clone()));
            Ok(self.answers.lock().unwrap().pop().expect("scripted answer"))
        }
    }

    fn fin(s: &str) -> EngineResponse {
        EngineResponse::Final(s.to_string())
    }

    #[test]
    fn equal_secondary_gets_one_repair() {
        let engine = Recorder::new(vec![
            fin(r#"{"primary":"dish","secondary":"dish"}"#),
            fin(r#"{"primary":"dish","secondary":"grocery"}"#),
        ]);
        let p = run(&engine, "x", CatalogEvidence::default(), &fixture_tool(), ToolBudget::default()).unwrap();
        assert_eq!(p.tuple.secondary, Some("grocery".into()));
        let seen = engine.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[0].1.is_none());
        assert!(seen[1].1.is_some());
        assert!(seen[1].2.contains("## Correction"));
    }

    #[test]
    fn repeated_bad_output_is_a_classification_error() {
        let engine = Recorder::new(vec![
            fin(r#"{"primary":"dish","secondary":"dish"}"#),
            fin(r#"{"primary":"dish","secondary":"dish"}"#),
        ]);
        let err = run(&engine, "x", CatalogEvidence::default(), &fixture_tool(), ToolBudget::default()).unwrap_err();
        assert_eq!(err.kind.class(), "unparseable");
    }

    struct AlwaysSearch(AtomicUsize);
    impl ReasoningEngine for AlwaysSearch {
        fn identity(&self) -> String {
            "always-search".into()
        }
        fn respond(&self, _: &EngineRequest<'_>) -> Result<EngineResponse, EngineError> {
            let n = self.0.fetch_add(1, Ordering::Relaxed);
            Ok(EngineResponse::ToolCall {
                name: SEARCH_TOOL_NAME.into(),
                arguments: format!("q{n}"),
            })
        }
    }

    struct CountingTool(AtomicUsize);
    impl SearchTool for CountingTool {
        fn identity(&self) -> String {
            "counting".into()
        }
        fn search(&self, _: &str, _: usize, _: Duration) -> Result<Vec<SearchSnippet>, ToolError> {
            self.0.fetch_add(1, Ordering::Relaxed);
            Err(ToolError::Timeout)
        }
    }

    #[test]
    fn adversarial_engine_cannot_exceed_budget() {
        for max in 0..4 {
            let tool = CountingTool(AtomicUsize::new(0));
            let budget = ToolBudget { max_tool_calls: max, ..Default::default() };
            let err = run(&AlwaysSearch(AtomicUsize::new(0)), "q", CatalogEvidence::default(), &tool, budget).unwrap_err();
            assert_eq!(tool.0.load(Ordering::Relaxed), max);
            assert_eq!(err.external.tool_queries.len(), max);
            assert_eq!(err.external.tool_errors.len(), max);
        }
    }

    #[test]
    fn exhausted_and_unavailable_are_announced() {
        let engine = Recorder::new(vec![
            EngineResponse::ToolCall { name: SEARCH_TOOL_NAME.into(), arguments: "450 north".into() },
            fin(r#"{"primary":"alcohol","secondary":null}"#),
        ]);
        let budget = ToolBudget { max_tool_calls: 1, ..Default::default() };
        run(&engine, "450 north", CatalogEvidence::default(), &fixture_tool(), budget).unwrap();
        let seen = engine.seen.lock().unwrap();
        assert_eq!(seen[0].0, ToolStatus::Available { remaining: 1 });
        assert_eq!(seen[1].0, ToolStatus::Exhausted);
        assert!(seen[1].2.contains("Craft brewery, not a restaurant"));
        assert!(seen[1].2.contains("budget is exhausted"));
    }

    #[test]
    fn tool_failure_is_noted_not_fatal() {
        let engine = Recorder::new(vec![
            EngineResponse::ToolCall { name: SEARCH_TOOL_NAME.into(), arguments: "x".into() },
            fin(r#"{"primary":"grocery","secondary":null}"#),
        ]);
        let tool = CountingTool(AtomicUsize::new(0));
        let p = run(&engine, "x", CatalogEvidence::default(), &tool, ToolBudget::default()).unwrap();
        assert_eq!(p.tuple.primary.as_str(), "grocery");
        assert_eq!(p.external.tool_errors.len(), 1);
        assert!(engine.seen.lock().unwrap()[1].2.contains("tool failure"));
    }

    #[test]
    fn web_search_contract() {
        let tool = fixture_tool();
        let t = Duration::from_secs(1);
        assert_eq!(web_search(&tool, "450 north", 5, t).unwrap()[0].snippet, "Craft brewery, not a restaurant");
        assert!(web_search(&tool, "unknown", 5, t).unwrap().is_empty());
        assert_eq!(web_search(&tool, "  ", 5, t), Err(ToolError::EmptyQuery));
        assert!(web_search(&tool, "450 north", 0, t).unwrap().is_empty());
    }

    #[test]
    fn prompt_sections_and_determinism() {
        let t = taxonomy();
        let q = Query::new("wildflower");
        let doc = assemble_prompt(&q, &EvidenceBundle::default(), &PolicyContext::default(), &t);
        assert!(doc.text.contains("## Verticals"));
        assert!(doc.text.contains("## Query\nwildflower"));
        for absent in ["Strategic rules", "Examples", "Catalog evidence", "External search"] {
            assert!(!doc.text.contains(absent), "{absent}");
        }
        let policy = PolicyContext {
            strategic_rules: vec!["Prefer restaurants for merchant names.".into()],
            example_bank: vec![Exemplar {
                query: "taco loco".into(),
                evidence: "Taco Loco (restaurant)".into(),
                tuple: IntentTuple::single("restaurant"),
            }],
        };
        let bundle = EvidenceBundle {
            catalog: CatalogEvidence { matches: vec![m("m1", "Wildflower Bites", "restaurant", 1.0)] },
            external: ExternalEvidence::default(),
        };
        let a = assemble_prompt(&q, &bundle, &policy, &t);
        let b = assemble_prompt(&q, &bundle, &policy, &t);
        assert_eq!(a, b);
        let order: Vec<usize> = ["## Verticals", "## Strategic rules", "## Examples", "## Catalog evidence", "## Query", "## Output format"]
            .iter()
            .map(|s| a.text.find(s).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(a.text.contains("- Wildflower Bites | kind: merchant | vertical: restaurant | fuzzy: 1.000"));
    }

    #[test]
    fn scripted_rules_must_use_taxonomy() {
        let mut r = rules();
        r.default_vertical = "pets".into();
        assert!(scripted_engine(r, &taxonomy()).is_err());
        let mut r = rules();
        r.keyword_rules[0].secondary = Some("alcohol".into());
        assert!(matches!(scripted_engine(r, &taxonomy()), Err(ScriptError::Rule(0, _))));
    }
}
