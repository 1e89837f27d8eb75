//! Benchmark harness: accuracy by traffic segment, the four-arm ablation and
//! derivation of the conflict whitelist from historical outcomes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{normalize_text, CatalogRecord, EntityKind, EntityStore, Segment, Taxonomy, Vertical, VerticalId};
use crate::disambiguation::{ConflictWhitelist, WhitelistError};
use crate::fuzzy::fuzzy_score;
use crate::pipeline::{classify_query, AblationFlags, PipelineConfig, PipelineDeps};
use crate::reasoner::{
    scripted_engine, FixtureSearchTool, KeywordRule, PolicyContext, ScriptedRules, SearchSnippet,
};
use crate::retrieval::{build_index, hash_encoder};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed records:\n{}", .0.iter().map(|(l, m)| format!("  line {l}: {m}")).collect::<Vec<_>>().join("\n"))]
    Malformed(Vec<(usize, String)>),
    #[error("win-rate threshold must be in (0.5, 1], got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Whitelist(#[from] WhitelistError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("building synthetic stack: {0}")]
    Build(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkCase {
    pub query: String,
    pub truth: VerticalId,
    pub segment: Segment,
}

/// Reads line-delimited `{query, truth, segment}` records.
pub fn load_benchmark<R: BufRead>(source: R, taxonomy: &Taxonomy) -> Result<Vec<BenchmarkCase>, EvalError> {
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkCase>(&line) {
            Ok(c) if taxonomy.contains(c.truth.as_str()) => cases.push(c),
            Ok(c) => errors.push((i + 1, format!("unknown vertical {:?}", c.truth.as_str()))),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(cases)
    } else {
        Err(EvalError::Malformed(errors))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    /// `None` when there were no cases.
    pub accuracy: Option<f64>,
}

impl Accuracy {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
        self.accuracy = Some(self.correct as f64 / self.total as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub flags: AblationFlags,
    pub overall: Accuracy,
    pub segments: BTreeMap<String, Accuracy>,
    pub retrievals: usize,
    pub tool_calls: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub from: String,
    pub to: String,
    /// Percentage points; `None` if either arm had no cases.
    pub delta_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arms: Vec<ArmReport>,
    pub deltas: Vec<ArmDelta>,
}

fn segment_name(s: Segment) -> &'static str {
    match s {
        Segment::Head => "head",
        Segment::Torso => "torso",
        Segment::Tail => "tail",
        Segment::Unknown => "unknown",
    }
}

struct CaseOutcome {
    segment: Segment,
    correct: bool,
    retrieval: bool,
    tool_calls: usize,
    failed: bool,
}

fn run_arm(name: &str, cases: &[BenchmarkCase], deps: &PipelineDeps, config: &PipelineConfig) -> ArmReport {
    let outcomes: Vec<CaseOutcome> = cases
        .par_iter()
        .map(|case| match classify_query(&case.query, deps, config) {
            Ok(c) => CaseOutcome {
                segment: case.segment,
                correct: c.resolved.final_vertical == case.truth,
                retrieval: c.retrieval_performed,
                tool_calls: c.tool_calls,
                failed: false,
            },
            Err(e) => CaseOutcome {
                segment: case.segment,
                correct: false,
                retrieval: config.ablation.catalog_grounding,
                tool_calls: e.tool_calls(),
                failed: true,
            },
        })
        .collect();

    let mut report = ArmReport {
        arm: name.to_string(),
        flags: config.ablation,
        overall: Accuracy::default(),
        segments: BTreeMap::new(),
        retrievals: 0,
        tool_calls: 0,
        failures: 0,
    };
    for o in outcomes {
        report.overall.add(o.correct);
        report
            .segments
            .entry(segment_name(o.segment).to_string())
            .or_default()
            .add(o.correct);
        report.retrievals += usize::from(o.retrieval);
        report.tool_calls += o.tool_calls;
        report.failures += usize::from(o.failed);
    }
    report
}

fn with_deltas(arms: Vec<ArmReport>) -> EvalReport {
    let deltas = arms
        .windows(2)
        .map(|w| ArmDelta {
            from: w[0].arm.clone(),
            to: w[1].arm.clone(),
            delta_pp: w[0]
                .overall
                .accuracy
                .zip(w[1].overall.accuracy)
                .map(|(a, b)| (b - a) * 100.0),
        })
        .collect();
    EvalReport { arms, deltas }
}

/// Accuracy of the final resolved intent; failed classifications count as wrong.
pub fn evaluate(cases: &[BenchmarkCase], deps: &PipelineDeps, config: &PipelineConfig) -> EvalReport {
    with_deltas(vec![run_arm("eval", cases, deps, config)])
}

pub const ABLATION_ARMS: [(&str, AblationFlags); 4] = [
    ("Baseline", AblationFlags::all(false)),
    (
        "+Catalog",
        AblationFlags {
            catalog_grounding: true,
            agentic_search: false,
            dual_intent: false,
        },
    ),
    (
        "+Agentic",
        AblationFlags {
            catalog_grounding: true,
            agentic_search: true,
            dual_intent: false,
        },
    ),
    ("Full", AblationFlags::all(true)),
];

/// Runs the four arms over identical dependencies, varying only the flags.
pub fn run_ablation(cases: &[BenchmarkCase], deps: &PipelineDeps, config: &PipelineConfig) -> EvalReport {
    let arms = ABLATION_ARMS
        .iter()
        .map(|(name, flags)| {
            let arm_config = PipelineConfig {
                ablation: *flags,
                ..config.clone()
            };
            run_arm(name, cases, deps, &arm_config)
        })
        .collect();
    with_deltas(arms)
}

fn pct(a: &Accuracy) -> String {
    a.accuracy.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}%", x * 100.0))
}

/// Plain-text table of a report, one row per arm.
pub fn render_table(report: &EvalReport) -> String {
    let mut segments: BTreeSet<&str> = BTreeSet::new();
    for arm in &report.arms {
        segments.extend(arm.segments.keys().map(String::as_str));
    }
    let rank = |s: &str| ["head", "torso", "tail"].iter().position(|x| *x == s).unwrap_or(3);
    let mut segments: Vec<&str> = segments.into_iter().collect();
    segments.sort_by_key(|s| (rank(s), *s));
    let mut out = format!("{:<10} {:>9}", "arm", "overall");
    for s in &segments {
        let _ = write!(out, " {s:>9}");
    }
    let _ = writeln!(out, " {:>7} {:>7} {:>6}", "retriev", "tools", "failed");
    for arm in &report.arms {
        let _ = write!(out, "{:<10} {:>9}", arm.arm, pct(&arm.overall));
        for s in &segments {
            let _ = write!(out, " {:>9}", arm.segments.get(*s).map_or_else(|| "-".to_string(), pct));
        }
        let _ = writeln!(out, " {:>7} {:>7} {:>6}", arm.retrievals, arm.tool_calls, arm.failures);
    }
    for d in &report.deltas {
        let delta = d.delta_pp.map_or_else(|| "n/a".to_string(), |x| format!("{x:+.1}pp"));
        let _ = writeln!(out, "{} -> {}: {delta}", d.from, d.to);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub primary: VerticalId,
    pub secondary: VerticalId,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    pub primary: VerticalId,
    pub secondary: VerticalId,
    pub observations: usize,
    pub secondary_wins: usize,
    pub win_rate: f64,
    pub included: bool,
}

pub const DEFAULT_MIN_SUPPORT: usize = 20;

/// Builds the whitelist from labeled conflict outcomes: a pair is included
/// when it has at least `min_support` observations and the secondary won at
/// least `threshold` of them.
pub fn derive_whitelist<R: BufRead>(
    interactions: R,
    threshold: f64,
    min_support: usize,
    taxonomy: &Taxonomy,
    version: &str,
) -> Result<(ConflictWhitelist, Vec<PairStats>), EvalError> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(EvalError::Threshold(threshold));
    }
    let mut counts: BTreeMap<(VerticalId, VerticalId), (usize, usize)> = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, line) in interactions.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Interaction = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push((i + 1, e.to_string()));
                continue;
            }
        };
        if let Some(v) = [&record.primary, &record.secondary]
            .into_iter()
            .find(|v| !taxonomy.contains(v.as_str()))
        {
            errors.push((i + 1, format!("unknown vertical {:?}", v.as_str())));
            continue;
        }
        if record.primary == record.secondary {
            errors.push((i + 1, "primary equals secondary".into()));
            continue;
        }
        let entry = counts.entry((record.primary, record.secondary)).or_default();
        entry.0 += 1;
        entry.1 += usize::from(record.winner == Winner::Secondary);
    }
    if !errors.is_empty() {
        return Err(EvalError::Malformed(errors));
    }
    let stats: Vec<PairStats> = counts
        .into_iter()
        .map(|((primary, secondary), (n, wins))| {
            let win_rate = wins as f64 / n as f64;
            PairStats {
                primary,
                secondary,
                observations: n,
                secondary_wins: wins,
                win_rate,
                included: n >= min_support && win_rate >= threshold,
            }
        })
        .collect();
    let whitelist = ConflictWhitelist::new(
        version,
        stats
            .iter()
            .filter(|s| s.included)
            .map(|s| (s.primary.clone(), s.secondary.clone())),
        taxonomy,
    )?;
    Ok((whitelist, stats))
}

/// Which added capability a synthetic case depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseFamily {
    /// Answerable without evidence (the default vertical).
    Default,
    /// Needs catalog evidence.
    Catalog,
    /// Needs a web-search snippet.
    Search,
    /// Needs the whitelist override of a dual-intent tuple.
    Override,
}

/// A generated corpus in which each capability is necessary for a known
/// subset of cases.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub seed: u64,
    pub taxonomy: Taxonomy,
    pub catalog: Vec<CatalogRecord>,
    pub search_fixtures: BTreeMap<String, Vec<SearchSnippet>>,
    pub rules: ScriptedRules,
    pub whitelist: ConflictWhitelist,
    pub cases: Vec<BenchmarkCase>,
    pub families: Vec<CaseFamily>,
}

const SYNTH_VERTICALS: [(&str, &str); 7] = [
    ("restaurant", "Restaurant"),
    ("grocery", "Grocery"),
    ("alcohol", "Alcohol"),
    ("flower", "Flower"),
    ("dish", "Dish"),
    ("retail_store", "Retail Store"),
    ("pet", "Pet"),
];

const SEARCH_RULES: [(&str, &str, Option<&str>); 4] = [
    ("brewery", "alcohol", Some("retail_store")),
    ("florist", "flower", None),
    ("supermarket", "grocery", None),
    ("pet supplies", "pet", None),
];

// Names in different groups must stay well below the fuzzy threshold.
const SEPARATION: f64 = 0.6;

struct NameGen {
    rng: ChaCha8Rng,
    surfaces: Vec<String>,
}

impl NameGen {
    fn word(&mut self) -> String {
        const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
        const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
        let syllables = self.rng.random_range(2..=3);
        (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(&mut self.rng).unwrap(), VOWELS.choose(&mut self.rng).unwrap()))
            .collect()
    }

    /// A two-word name that the fuzzy scorer keeps apart from every earlier group.
    fn fresh(&mut self, extra_words: &[&str]) -> Vec<String> {
        loop {
            let base = format!("{} {}", self.word(), self.word());
            let group: Vec<String> = std::iter::once(base.clone())
                .chain(extra_words.iter().map(|w| format!("{base} {w}")))
                .collect();
            let clear = group.iter().all(|s| {
                self.surfaces
                    .iter()
                    .all(|t| fuzzy_score(s, t, 0.6) < SEPARATION && fuzzy_score(t, s, 0.6) < SEPARATION)
            });
            if clear {
                self.surfaces.extend(group.iter().cloned());
                return group;
            }
        }
    }
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect::<String>())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl SyntheticBenchmark {
    /// Generates `per_family` cases of each [`CaseFamily`].
    pub fn generate(seed: u64, per_family: usize) -> Self {
        let taxonomy = Taxonomy::new(
            SYNTH_VERTICALS
                .iter()
                .map(|(id, name)| Vertical {
                    id: VerticalId::from(*id),
                    display_name: name.to_string(),
                })
                .collect(),
        )
        .expect("synthetic taxonomy is valid");
        let mut gen = NameGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            surfaces: Vec::new(),
        };
        let segments = [Segment::Head, Segment::Torso, Segment::Tail];
        let catalog_verticals = ["grocery", "alcohol", "flower", "retail_store", "pet"];
        let kinds = [EntityKind::Merchant, EntityKind::Brand, EntityKind::Product];

        let mut catalog = Vec::new();
        let mut search_fixtures = BTreeMap::new();
        let mut cases = Vec::new();
        let mut families = Vec::new();
        let mut next_id = 0usize;
        let mut entity = |name: &str, vertical: &str, kind: EntityKind| {
            next_id += 1;
            CatalogRecord {
                entity_id: format!("e{next_id:05}"),
                name: title_case(name),
                kind,
                vertical: vertical.to_string(),
                aliases: Vec::new(),
            }
        };

        for i in 0..per_family * 4 {
            let family = [CaseFamily::Default, CaseFamily::Catalog, CaseFamily::Search, CaseFamily::Override][i % 4];
            let segment = *segments.choose(&mut gen.rng).unwrap();
            let (query, truth) = match family {
                CaseFamily::Default => (gen.fresh(&[]).remove(0), "restaurant"),
                CaseFamily::Catalog => {
                    let name = gen.fresh(&[]).remove(0);
                    let vertical = *catalog_verticals.choose(&mut gen.rng).unwrap();
                    let kind = *kinds.choose(&mut gen.rng).unwrap();
                    catalog.push(entity(&name, vertical, kind));
                    (name, vertical)
                }
                CaseFamily::Search => {
                    let query = gen.fresh(&[]).remove(0);
                    let (keyword, vertical, _) = *SEARCH_RULES.choose(&mut gen.rng).unwrap();
                    search_fixtures.insert(
                        query.clone(),
                        vec![SearchSnippet {
                            source_url: format!("https://search.invalid/{}", query.replace(' ', "-")),
                            title: title_case(&query),
                            snippet: format!("{} is a local {keyword}.", title_case(&query)),
                        }],
                    );
                    (query, vertical)
                }
                CaseFamily::Override => {
                    let group = gen.fresh(&["market"]);
                    catalog.push(entity(&group[0], "dish", EntityKind::Product));
                    catalog.push(entity(&group[1], "grocery", EntityKind::Merchant));
                    (group[0].clone(), "grocery")
                }
            };
            cases.push(BenchmarkCase {
                query,
                truth: truth.into(),
                segment,
            });
            families.push(family);
        }

        let rules = ScriptedRules {
            default_vertical: "restaurant".into(),
            secondary_margin: 0.1,
            keyword_rules: SEARCH_RULES
                .iter()
                .map(|(k, p, s)| KeywordRule {
                    keyword: k.to_string(),
                    primary: (*p).into(),
                    secondary: s.map(Into::into),
                })
                .collect(),
        };
        let whitelist = ConflictWhitelist::new(format!("synthetic-{seed}"), [("dish".into(), "grocery".into())], &taxonomy)
            .expect("synthetic whitelist is valid");
        Self {
            seed,
            taxonomy,
            catalog,
            search_fixtures,
            rules,
            whitelist,
            cases,
            families,
        }
    }

    /// Scripted engine, fixture search and a hash encoder over the generated catalog.
    pub fn build_deps(&self) -> Result<PipelineDeps, EvalError> {
        let store = EntityStore::from_records(self.catalog.clone(), self.taxonomy.clone(), 1)
            .map_err(|e| EvalError::Build(e.to_string()))?;
        let encoder = hash_encoder(128, self.seed).map_err(|e| EvalError::Build(e.to_string()))?;
        let index = build_index(&store, &encoder).map_err(|e| EvalError::Build(e.to_string()))?;
        let engine = scripted_engine(self.rules.clone(), &self.taxonomy).map_err(|e| EvalError::Build(e.to_string()))?;
        Ok(PipelineDeps {
            store: Arc::new(store),
            index: Arc::new(index),
            encoder: Arc::new(encoder),
            engine: Arc::new(engine),
            tool: Arc::new(FixtureSearchTool::new(self.search_fixtures.clone())),
            whitelist: Arc::new(self.whitelist.clone()),
            policy: Arc::new(PolicyContext::default()),
        })
    }

    /// Writes the corpus as the file set the CLI consumes, plus `config.toml`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("taxonomy.json"), pretty(&serde_json::json!({ "verticals": self.taxonomy.verticals() })))?;
        let catalog: String = self
            .catalog
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        std::fs::write(dir.join("catalog.jsonl"), catalog)?;
        std::fs::write(dir.join("search.json"), pretty(&self.search_fixtures))?;
        std::fs::write(dir.join("rules.json"), pretty(&self.rules))?;
        std::fs::write(
            dir.join("whitelist.json"),
            pretty(&self.whitelist.to_document()),
        )?;
        let cases: String = self
            .cases
            .iter()
            .map(|c| serde_json::to_string(c).expect("case serializes") + "\n")
            .collect();
        std::fs::write(dir.join("benchmark.jsonl"), cases)?;
        let queries: String = self.cases.iter().map(|c| format!("{}\n", c.query)).collect();
        std::fs::write(dir.join("queries.txt"), queries)?;
        std::fs::write(
            dir.join("config.toml"),
            format!(
                "# synthetic benchmark, seed {seed}\n\
                 [data]\ntaxonomy = \"taxonomy.json\"\ncatalog = \"catalog.jsonl\"\n\
                 whitelist = \"whitelist.json\"\n\n\
                 [encoder]\nkind = \"hash\"\ndimension = 128\nseed = {seed}\n\n\
                 [engine]\nkind = \"scripted\"\nrules = \"rules.json\"\n\n\
                 [search]\nkind = \"fixture\"\npath = \"search.json\"\n",
                seed = self.seed
            ),
        )?;
        Ok(())
    }

    pub fn normalized_queries(&self) -> Vec<String> {
        self.cases.iter().map(|c| normalize_text(&c.query)).collect()
    }
}

fn pretty<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}
