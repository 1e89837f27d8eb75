//! Stage one of catalog retrieval: dense embedding of every entity surface
//! and exact cosine top-N search.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{EntityStore, Query, StoreVersion};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty store")]
    EmptyStore,
    #[error("encoder dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("encoder failed on surface {surface:?}: {source}")]
    EncodeSurface {
        surface: String,
        #[source]
        source: EncodeError,
    },
    #[error("encoder returned a zero vector for surface {0:?}")]
    ZeroVector(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("index file error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("encoder returned {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("transport: {0}")]
    Transport(String),
    #[error("provider: {0}")]
    Provider(String),
}

/// The embedding model: maps text to a vector of fixed dimension.
///
/// Implementations must be deterministic within one `identity`.
pub trait Encoder: Send + Sync {
    fn dimension(&self) -> usize;
    fn identity(&self) -> String;
    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncodeError> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

/// Scales `v` to unit L2 norm. Returns `None` for the zero vector.
pub fn l2_normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic stand-in encoder: character trigram counts hashed into
/// `dimension` buckets with a seeded FNV-1a, then L2-normalized.
///
/// Texts shorter than three characters form a single gram; empty text maps
/// to the first basis vector.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dimension: usize,
    seed: u64,
}

pub fn hash_encoder(dimension: usize, seed: u64) -> Result<HashEncoder, RetrievalError> {
    if dimension < 2 {
        return Err(RetrievalError::DimensionTooSmall(dimension));
    }
    Ok(HashEncoder { dimension, seed })
}

impl HashEncoder {
    fn bucket(&self, gram: &[char]) -> usize {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for c in gram {
            for b in (*c as u32).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        (h % self.dimension as u64) as usize
    }
}

impl Encoder for HashEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn identity(&self) -> String {
        format!("hash-trigram-v1/d{}/s{}", self.dimension, self.seed)
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0; self.dimension];
        if chars.is_empty() {
            v[0] = 1.0;
            return Ok(v);
        }
        if chars.len() < 3 {
            v[self.bucket(&chars)] += 1.0;
        } else {
            for gram in chars.windows(3) {
                v[self.bucket(gram)] += 1.0;
            }
        }
        Ok(l2_normalize(v).expect("at least one gram was counted"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub entity_id: String,
    pub surface: String,
    pub vector: Vec<f64>,
}

/// Exact cosine index with one entry per (entity, normalized surface).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticIndex {
    store_version: StoreVersion,
    encoder_identity: String,
    dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub entity_id: String,
    pub surface: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_n: usize,
    pub alpha: f64,
    pub tau_fuzzy: f64,
    pub max_intents: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_n: 50,
            alpha: 0.6,
            tau_fuzzy: 0.75,
            max_intents: 2,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.top_n < 1 {
            return Err(RetrievalError::Config("top_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RetrievalError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau_fuzzy) {
            return Err(RetrievalError::Config(format!("tau_fuzzy {} outside [0, 1]", self.tau_fuzzy)));
        }
        if self.max_intents != 2 {
            return Err(RetrievalError::Config("max_intents is fixed at 2".into()));
        }
        Ok(())
    }
}

pub fn build_index(store: &EntityStore, encoder: &dyn Encoder) -> Result<SemanticIndex, RetrievalError> {
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let dimension = encoder.dimension();
    if dimension < 2 {
        return Err(RetrievalError::DimensionTooSmall(dimension));
    }
    let pairs: Vec<(&str, &str)> = store
        .iter()
        .flat_map(|e| e.match_surfaces().into_iter().map(move |s| (e.entity_id.as_str(), s)))
        .collect();
    let surfaces: Vec<&str> = pairs.iter().map(|(_, s)| *s).collect();
    let vectors = encode_all(encoder, &surfaces)?;
    let entries = pairs
        .into_iter()
        .zip(vectors)
        .map(|((id, surface), vector)| IndexEntry {
            entity_id: id.to_string(),
            surface: surface.to_string(),
            vector,
        })
        .collect();
    Ok(SemanticIndex {
        store_version: store.version().clone(),
        encoder_identity: encoder.identity(),
        dimension,
        entries,
    })
}

fn encode_all(encoder: &dyn Encoder, surfaces: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
    const CHUNK: usize = 64;
    let dim = encoder.dimension();
    let mut out = Vec::with_capacity(surfaces.len());
    for chunk in surfaces.chunks(CHUNK) {
        let vectors = match encoder.encode_batch(chunk) {
            Ok(v) if v.len() == chunk.len() => v,
            // Fall back per surface so the failing one can be named.
            _ => chunk
                .iter()
                .map(|s| {
                    encoder.encode(s).map_err(|source| RetrievalError::EncodeSurface {
                        surface: s.to_string(),
                        source,
                    })
                })
                .collect::<Result<_, _>>()?,
        };
        for (surface, v) in chunk.iter().zip(vectors) {
            if v.len() != dim {
                return Err(RetrievalError::EncodeSurface {
                    surface: surface.to_string(),
                    source: EncodeError::Dimension { expected: dim, got: v.len() },
                });
            }
            out.push(l2_normalize(v).ok_or_else(|| RetrievalError::ZeroVector(surface.to_string()))?);
        }
    }
    Ok(out)
}

impl SemanticIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn encoder_identity(&self) -> &str {
        &self.encoder_identity
    }

    pub fn store_version(&self) -> &StoreVersion {
        &self.store_version
    }

    pub fn distinct_entities(&self) -> usize {
        self.entries.iter().map(|e| e.entity_id.as_str()).collect::<HashSet<_>>().len()
    }

    fn check_encoder(&self, encoder: &dyn Encoder) -> Result<(), RetrievalError> {
        if encoder.dimension() != self.dimension {
            return Err(RetrievalError::Config(format!(
                "encoder dimension {} does not match index dimension {}",
                encoder.dimension(),
                self.dimension
            )));
        }
        let id = encoder.identity();
        if id != self.encoder_identity {
            return Err(RetrievalError::Config(format!(
                "encoder {id:?} does not match index encoder {:?}",
                self.encoder_identity
            )));
        }
        Ok(())
    }

    /// Verifies that the index was built from `store`.
    pub fn check_store(&self, store: &EntityStore) -> Result<(), RetrievalError> {
        if self.store_version.fingerprint != store.version().fingerprint {
            return Err(RetrievalError::Config(format!(
                "index built from store {} but active store is {}",
                self.store_version,
                store.version()
            )));
        }
        Ok(())
    }
}

fn ranks_before(a: &CandidateMatch, b: &CandidateMatch) -> std::cmp::Ordering {
    b.cosine.total_cmp(&a.cosine).then_with(|| a.entity_id.cmp(&b.entity_id))
}

/// Exact top-`n` entities by cosine, one match per entity (its best surface),
/// sorted by cosine descending then entity id ascending.
pub fn semantic_topn(
    index: &SemanticIndex,
    query: &Query,
    encoder: &dyn Encoder,
    n: usize,
) -> Result<Vec<CandidateMatch>, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::Config("n must be positive".into()));
    }
    index.check_encoder(encoder)?;
    let raw = encoder.encode(&query.normalized)?;
    if raw.len() != index.dimension {
        return Err(RetrievalError::Config(format!(
            "query vector has {} values, index dimension is {}",
            raw.len(),
            index.dimension
        )));
    }
    let Some(qv) = l2_normalize(raw) else {
        return Err(RetrievalError::ZeroVector(query.normalized.clone()));
    };

    // Entries are grouped by entity in store order; keep each entity's best surface.
    let mut best: Vec<CandidateMatch> = Vec::new();
    for entry in &index.entries {
        let cosine = dot(&qv, &entry.vector).clamp(-1.0, 1.0);
        match best.last_mut() {
            Some(last) if last.entity_id == entry.entity_id => {
                if cosine > last.cosine {
                    last.cosine = cosine;
                    last.surface.clone_from(&entry.surface);
                }
            }
            _ => best.push(CandidateMatch {
                entity_id: entry.entity_id.clone(),
                surface: entry.surface.clone(),
                cosine,
            }),
        }
    }
    if n < best.len() {
        best.select_nth_unstable_by(n - 1, ranks_before);
        best.truncate(n);
    }
    best.sort_by(ranks_before);
    Ok(best)
}

const INDEX_MAGIC: &[u8; 8] = b"GIIDX\x00\x01\x00";

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    dimension: usize,
    encoder_identity: String,
    store_version: StoreVersion,
    entries: usize,
}

impl SemanticIndex {
    /// Binary layout: 8-byte magic, u32 LE header length, JSON header, then
    /// per entry: u32 LE id length, id bytes, u32 LE surface length, surface
    /// bytes, `dimension` f64 LE values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        let header = IndexHeader {
            dimension: self.dimension,
            encoder_identity: self.encoder_identity.clone(),
            store_version: self.store_version.clone(),
            entries: self.entries.len(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| RetrievalError::Format(e.to_string()))?;
        w.write_all(INDEX_MAGIC)?;
        write_bytes(&mut w, &header)?;
        for entry in &self.entries {
            write_bytes(&mut w, entry.entity_id.as_bytes())?;
            write_bytes(&mut w, entry.surface.as_bytes())?;
            for x in &entry.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an index and verifies it against the active store and encoder.
    pub fn read_from<R: Read>(
        mut r: R,
        store: &EntityStore,
        encoder: &dyn Encoder,
    ) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let header: IndexHeader = serde_json::from_slice(&read_bytes(&mut r)?)
            .map_err(|e| RetrievalError::Format(format!("header: {e}")))?;
        let mut entries = Vec::with_capacity(header.entries);
        for _ in 0..header.entries {
            let entity_id = read_string(&mut r)?;
            let surface = read_string(&mut r)?;
            let mut vector = Vec::with_capacity(header.dimension);
            let mut buf = [0u8; 8];
            for _ in 0..header.dimension {
                r.read_exact(&mut buf)?;
                vector.push(f64::from_le_bytes(buf));
            }
            if store.get(&entity_id).is_none() {
                return Err(RetrievalError::Format(format!("entity {entity_id:?} not in store")));
            }
            entries.push(IndexEntry { entity_id, surface, vector });
        }
        let index = SemanticIndex {
            store_version: header.store_version,
            encoder_identity: header.encoder_identity,
            dimension: header.dimension,
            entries,
        };
        index.check_store(store)?;
        index.check_encoder(encoder)?;
        Ok(index)
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| std::io::Error::other("field too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, RetrievalError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(RetrievalError::Format("field length out of range".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_string<R: Read>(r: &mut R) -> Result<String, RetrievalError> {
    String::from_utf8(read_bytes(r)?).map_err(|e| RetrievalError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CatalogRecord, EntityKind, Taxonomy};

    fn taxonomy() -> Taxonomy {
        Taxonomy::from_json(
            r#"{"verticals":[{"id":"restaurant","display_name":"Restaurant"},{"id":"flower","display_name":"Flower"}]}"#,
        )
        .unwrap()
    }

    fn rec(id: &str, name: &str, aliases: &[&str]) -> CatalogRecord {
        CatalogRecord {
            entity_id: id.into(),
            name: name.into(),
            kind: EntityKind::Merchant,
            vertical: "restaurant".into(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }

    #[test]
    fn hash_encoder_is_deterministic_and_unit() {
        let enc = hash_encoder(64, 7).unwrap();
        let a = enc.encode("abc").unwrap();
        let b = enc.encode("abc").unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_encoder_empty_text_is_first_basis_vector() {
        let enc = hash_encoder(8, 1).unwrap();
        let v = enc.encode("").unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn shared_trigrams_score_higher() {
        let enc = hash_encoder(256, 3).unwrap();
        let w = enc.encode("wildflower").unwrap();
        let near = cosine_raw(&w, &enc.encode("wildflower bites").unwrap());
        let far = cosine_raw(&w, &enc.encode("zq9 kk7").unwrap());
        assert!(near > far, "{near} <= {far}");
        assert!(near > 0.5);
    }

    #[test]
    fn dimension_below_two_rejected() {
        assert!(matches!(hash_encoder(1, 0), Err(RetrievalError::DimensionTooSmall(1))));
    }

    #[test]
    fn one_entry_per_surface() {
        let store =
            EntityStore::from_records([rec("a", "Wildflower Bites", &["Wildflower", "WFB"])], taxonomy(), 1).unwrap();
        let index = build_index(&store, &hash_encoder(32, 0).unwrap()).unwrap();
        assert_eq!(index.entries().len(), 3);
        assert_eq!(index.distinct_entities(), 1);
    }

    #[test]
    fn empty_store_rejected() {
        let store = EntityStore::from_records(Vec::new(), taxonomy(), 1).unwrap();
        let err = build_index(&store, &hash_encoder(32, 0).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "empty store");
    }

    struct ZeroEncoder;
    impl Encoder for ZeroEncoder {
        fn dimension(&self) -> usize {
            4
        }
        fn identity(&self) -> String {
            "zero".into()
        }
        fn encode(&self, _: &str) -> Result<Vec<f64>, EncodeError> {
            Ok(vec![0.0; 4])
        }
    }

    struct FailingEncoder;
    impl Encoder for FailingEncoder {
        fn dimension(&self) -> usize {
            4
        }
        fn identity(&self) -> String {
            "failing".into()
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
            if text.contains("bad") {
                Err(EncodeError::Provider("refused".into()))
            } else {
                Ok(vec![1.0, 0.0, 0.0, 0.0])
            }
        }
    }

    #[test]
    fn encoder_failures_name_the_surface() {
        let store = EntityStore::from_records([rec("a", "Good", &["bad alias"])], taxonomy(), 1).unwrap();
        match build_index(&store, &FailingEncoder) {
            Err(RetrievalError::EncodeSurface { surface, .. }) => assert_eq!(surface, "bad alias"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(build_index(&store, &ZeroEncoder), Err(RetrievalError::ZeroVector(_))));
    }

    #[test]
    fn exact_surface_ranks_first_with_unit_cosine() {
        let store = EntityStore::from_records(
            [rec("a", "Taco Loco", &[]), rec("b", "Wildflower", &[]), rec("c", "Sushi Zen", &[])],
            taxonomy(),
            1,
        )
        .unwrap();
        let enc = hash_encoder(64, 11).unwrap();
        let index = build_index(&store, &enc).unwrap();
        let hits = semantic_topn(&index, &Query::new("WILDFLOWER"), &enc, 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].entity_id, "b");
        assert!((hits[0].cosine - 1.0).abs() < 1e-6);
        assert!(hits.windows(2).all(|w| w[0].cosine >= w[1].cosine));
    }

    #[test]
    fn mismatched_encoder_is_a_configuration_error() {
        let store = EntityStore::from_records([rec("a", "Taco", &[])], taxonomy(), 1).unwrap();
        let index = build_index(&store, &hash_encoder(64, 1).unwrap()).unwrap();
        let other = hash_encoder(32, 1).unwrap();
        assert!(matches!(
            semantic_topn(&index, &Query::new("taco"), &other, 5),
            Err(RetrievalError::Config(_))
        ));
    }

    #[test]
    fn index_round_trips_through_file_format() {
        let store = EntityStore::from_records(
            [rec("a", "Taco Loco", &["tacos"]), rec("b", "Wildflower", &[])],
            taxonomy(),
            4,
        )
        .unwrap();
        let enc = hash_encoder(16, 2).unwrap();
        let index = build_index(&store, &enc).unwrap();
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        let back = SemanticIndex::read_from(buf.as_slice(), &store, &enc).unwrap();
        assert_eq!(back, index);

        let other_store = EntityStore::from_records([rec("a", "Taco Loco", &[])], taxonomy(), 4).unwrap();
        assert!(SemanticIndex::read_from(buf.as_slice(), &other_store, &enc).is_err());
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            SemanticIndex::read_from(corrupt.as_slice(), &store, &enc),
            Err(RetrievalError::Format(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig { alpha: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { max_intents: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { top_n: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
