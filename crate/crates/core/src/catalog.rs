//! Marketplace catalog: vertical taxonomy, catalog entities and the
//! canonical text form used for matching and cache keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("taxonomy must contain at least 2 verticals, found {0}")]
    TooFewVerticals(usize),
    #[error("invalid vertical id {0:?}: ids must be non-empty and lowercase")]
    InvalidVerticalId(String),
    #[error("duplicate vertical id {0:?}")]
    DuplicateVertical(String),
    #[error("malformed catalog records:\n{}", format_record_errors(.0))]
    MalformedRecords(Vec<RecordError>),
    #[error("duplicate entity ids: {}", .0.join(", "))]
    DuplicateEntityIds(Vec<String>),
    #[error("line {line}: entity {entity_id:?} has unknown vertical {vertical:?}")]
    UnknownVertical {
        line: usize,
        entity_id: String,
        vertical: String,
    },
    #[error("catalog is empty")]
    Empty,
    #[error("taxonomy parse error: {0}")]
    TaxonomyFormat(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A malformed line in a catalog file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

fn format_record_errors(errors: &[RecordError]) -> String {
    errors
        .iter()
        .map(|e| format!("  line {}: {}", e.line, e.message))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Canonical form of free text: NFKC, lowercase, whitespace collapsed,
/// and only alphanumerics, space, `'`, `-` and `&` retained.
///
/// Idempotent. Empty output is legal for input with nothing to keep.
pub fn normalize_text(raw: &str) -> String {
    let mut current = normalize_pass(raw);
    // Filtering can bring composable characters together; iterate to a fixpoint.
    for _ in 0..8 {
        let next = normalize_pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

fn normalize_pass(raw: &str) -> String {
    let lowered: String = raw.nfkc().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.nfkc() {
        if c.is_whitespace() {
            pending_space = true;
        } else if is_retained(c) {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Characters that survive normalization (besides the single separating space).
pub fn is_retained(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '\'' | '-' | '&')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerticalId(String);

impl VerticalId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VerticalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VerticalId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertical {
    pub id: VerticalId,
    pub display_name: String,
}

/// The ordered set of business categories a query can be routed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    verticals: Vec<Vertical>,
}

#[derive(Deserialize)]
struct TaxonomyDocument {
    verticals: Vec<Vertical>,
}

impl Taxonomy {
    pub fn new(verticals: Vec<Vertical>) -> Result<Self, CatalogError> {
        if verticals.len() < 2 {
            return Err(CatalogError::TooFewVerticals(verticals.len()));
        }
        let mut seen = BTreeSet::new();
        for v in &verticals {
            let id = v.id.as_str();
            if id.is_empty() || id.chars().any(char::is_uppercase) {
                return Err(CatalogError::InvalidVerticalId(id.to_string()));
            }
            if !seen.insert(id) {
                return Err(CatalogError::DuplicateVertical(id.to_string()));
            }
        }
        Ok(Self { verticals })
    }

    /// Parses the taxonomy JSON document `{"verticals": [{id, display_name}]}`.
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let doc: TaxonomyDocument = serde_json::from_str(text)?;
        Self::new(doc.verticals)
    }

    pub fn verticals(&self) -> &[Vertical] {
        &self.verticals
    }

    pub fn contains(&self, id: &str) -> bool {
        self.verticals.iter().any(|v| v.id.as_str() == id)
    }

    pub fn get(&self, id: &str) -> Option<&Vertical> {
        self.verticals.iter().find(|v| v.id.as_str() == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Merchant,
    Brand,
    Product,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::Merchant => "merchant",
            EntityKind::Brand => "brand",
            EntityKind::Product => "product",
        })
    }
}

/// A text surface an entity can be matched on, kept raw and normalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Surface {
    pub raw: String,
    pub normalized: String,
}

impl Surface {
    fn new(raw: &str) -> Self {
        Self {
            raw: raw.to_string(),
            normalized: normalize_text(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogEntity {
    pub entity_id: String,
    pub name: Surface,
    pub kind: EntityKind,
    pub vertical: VerticalId,
    pub aliases: Vec<Surface>,
}

impl CatalogEntity {
    /// Normalized name followed by each normalized alias, duplicates removed.
    pub fn match_surfaces(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::with_capacity(1 + self.aliases.len());
        for s in std::iter::once(&self.name).chain(&self.aliases) {
            if !s.normalized.is_empty() && !out.contains(&s.normalized.as_str()) {
                out.push(&s.normalized);
            }
        }
        out
    }
}

/// One line of the catalog file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogRecord {
    pub entity_id: String,
    pub name: String,
    pub kind: EntityKind,
    pub vertical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// Build identifier of an [`EntityStore`]: an operator-assigned build number
/// plus a content fingerprint that indexes and caches are checked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreVersion {
    pub build: u64,
    pub fingerprint: String,
}

impl fmt::Display for StoreVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.build, self.fingerprint)
    }
}

/// Immutable, id-ordered collection of catalog entities.
#[derive(Debug, Clone)]
pub struct EntityStore {
    entities: BTreeMap<String, CatalogEntity>,
    taxonomy: Taxonomy,
    version: StoreVersion,
}

impl EntityStore {
    pub fn from_records(
        records: impl IntoIterator<Item = CatalogRecord>,
        taxonomy: Taxonomy,
        build: u64,
    ) -> Result<Self, CatalogError> {
        let numbered = records.into_iter().enumerate().map(|(i, r)| (i + 1, r));
        build_store(numbered, taxonomy, build)
    }

    pub fn get(&self, entity_id: &str) -> Option<&CatalogEntity> {
        self.entities.get(entity_id)
    }

    /// Entities in ascending `entity_id` order.
    pub fn iter(&self) -> impl Iterator<Item = &CatalogEntity> {
        self.entities.values()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn version(&self) -> &StoreVersion {
        &self.version
    }
}

/// Reads line-delimited JSON catalog records and builds an [`EntityStore`].
///
/// Malformed lines are collected and reported together. Blank lines are skipped.
pub fn load_catalog<R: BufRead>(source: R, taxonomy: Taxonomy) -> Result<EntityStore, CatalogError> {
    load_catalog_with_build(source, taxonomy, 1)
}

pub fn load_catalog_with_build<R: BufRead>(
    source: R,
    taxonomy: Taxonomy,
    build: u64,
) -> Result<EntityStore, CatalogError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CatalogRecord>(&line) {
            Ok(r) => records.push((line_no, r)),
            Err(e) => errors.push(RecordError {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(CatalogError::MalformedRecords(errors));
    }
    build_store(records, taxonomy, build)
}

fn build_store(
    records: impl IntoIterator<Item = (usize, CatalogRecord)>,
    taxonomy: Taxonomy,
    build: u64,
) -> Result<EntityStore, CatalogError> {
    let mut entities = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    let mut errors = Vec::new();
    for (line, record) in records {
        if record.entity_id.trim().is_empty() {
            errors.push(RecordError {
                line,
                message: "empty entity_id".into(),
            });
            continue;
        }
        if !taxonomy.contains(&record.vertical) {
            return Err(CatalogError::UnknownVertical {
                line,
                entity_id: record.entity_id,
                vertical: record.vertical,
            });
        }
        let name = Surface::new(&record.name);
        if name.normalized.is_empty() {
            errors.push(RecordError {
                line,
                message: format!("entity {:?} has an empty name after normalization", record.entity_id),
            });
            continue;
        }
        let entity = CatalogEntity {
            entity_id: record.entity_id.clone(),
            name,
            kind: record.kind,
            vertical: VerticalId::new(record.vertical),
            aliases: record.aliases.iter().map(|a| Surface::new(a)).collect(),
        };
        if entities.insert(record.entity_id.clone(), entity).is_some() {
            duplicates.insert(record.entity_id);
        }
    }
    if !errors.is_empty() {
        return Err(CatalogError::MalformedRecords(errors));
    }
    if !duplicates.is_empty() {
        return Err(CatalogError::DuplicateEntityIds(duplicates.into_iter().collect()));
    }
    let fingerprint = fingerprint(&entities, &taxonomy);
    Ok(EntityStore {
        entities,
        taxonomy,
        version: StoreVersion { build, fingerprint },
    })
}

fn fingerprint(entities: &BTreeMap<String, CatalogEntity>, taxonomy: &Taxonomy) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(taxonomy).expect("taxonomy serializes"));
    for e in entities.values() {
        hasher.update(serde_json::to_vec(e).expect("entity serializes"));
        hasher.update(b"\n");
    }
    hex::encode(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Head,
    Torso,
    Tail,
    Unknown,
}

/// A user query with its canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Query {
    pub raw: String,
    pub normalized: String,
    pub segment: Option<Segment>,
}

impl Query {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let normalized = normalize_text(&raw);
        Self {
            raw,
            normalized,
            segment: None,
        }
    }

    pub fn with_segment(mut self, segment: Segment) -> Self {
        self.segment = Some(segment);
        self
    }
}
