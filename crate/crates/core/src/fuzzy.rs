//! Stage two of catalog retrieval: lexical re-scoring of semantic candidates
//! and the precision filter that yields catalog evidence.
//!
//! All scores are in `[0, 1]`. Strings are compared as sequences of Unicode
//! scalar values with unit-cost insert, delete and substitute.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{EntityKind, EntityStore, Query, VerticalId};
use crate::retrieval::{CandidateMatch, RetrievalConfig};

#[derive(Debug, Error)]
pub enum FuzzyError {
    #[error("candidate entity {0:?} is not in the store (index/store version mismatch)")]
    UnknownEntity(String),
}

/// Edit distance over `char`s using a single rolling row.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(ca != cb);
            row[j + 1] = (above + 1).min(row[j] + 1).min(diag + cost);
            diag = above;
        }
    }
    row[b.len()]
}

fn similarity_chars(s: &[char], t: &[char]) -> f64 {
    let longest = s.len().max(t.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(s, t) as f64 / longest as f64
}

/// `1 - lev(s, t) / max(|s|, |t|)`, and 1 when both are empty.
pub fn normalized_similarity(s: &str, t: &str) -> f64 {
    let s: Vec<char> = s.chars().collect();
    let t: Vec<char> = t.chars().collect();
    similarity_chars(&s, &t)
}

pub fn token_set_score(q: &str, e: &str) -> f64 {
    let qt: BTreeSet<&str> = q.split(' ').filter(|t| !t.is_empty()).collect();
    let et: BTreeSet<&str> = e.split(' ').filter(|t| !t.is_empty()).collect();
    let common: Vec<&str> = qt.intersection(&et).copied().collect();
    let with = |extra: Vec<&str>| common.iter().copied().chain(extra).collect::<Vec<_>>().join(" ");
    let i = common.join(" ");
    let a = with(qt.difference(&et).copied().collect());
    let b = with(et.difference(&qt).copied().collect());
    normalized_similarity(&i, &a)
        .max(normalized_similarity(&i, &b))
        .max(normalized_similarity(&a, &b))
}

pub fn partial_ratio_score(q: &str, e: &str) -> f64 {
    let q: Vec<char> = q.chars().collect();
    let e: Vec<char> = e.chars().collect();
    let (short, long) = if q.len() <= e.len() { (&q, &e) } else { (&e, &q) };
    if short.is_empty() {
        return if long.is_empty() { 1.0 } else { 0.0 };
    }
    let mut best: f64 = 0.0;
    for window in long.windows(short.len()) {
        best = best.max(similarity_chars(short, window));
        if best == 1.0 {
            break;
        }
    }
    best
}

/// Convex blend `alpha * token_set + (1 - alpha) * partial_ratio`.
pub fn fuzzy_score(q: &str, e: &str, alpha: f64) -> f64 {
    alpha * token_set_score(q, e) + (1.0 - alpha) * partial_ratio_score(q, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyScoredMatch {
    pub entity_id: String,
    /// Normalized surface with the highest fuzzy score.
    pub surface: String,
    pub name: String,
    pub kind: EntityKind,
    pub vertical: VerticalId,
    pub cosine: f64,
    pub fuzzy: f64,
}

/// High-precision catalog matches, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatalogEvidence {
    pub matches: Vec<FuzzyScoredMatch>,
}

impl CatalogEvidence {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Scores every candidate on its best surface and keeps those at or above
/// `tau_fuzzy`, sorted by fuzzy, then cosine (both descending), then id.
pub fn refine(
    candidates: &[CandidateMatch],
    query: &Query,
    config: &RetrievalConfig,
    store: &EntityStore,
) -> Result<CatalogEvidence, FuzzyError> {
    let mut matches = Vec::new();
    for candidate in candidates {
        let entity = store
            .get(&candidate.entity_id)
            .ok_or_else(|| FuzzyError::UnknownEntity(candidate.entity_id.clone()))?;
        let (surface, fuzzy) = entity
            .match_surfaces()
            .into_iter()
            .map(|s| (s, fuzzy_score(&query.normalized, s, config.alpha)))
            .fold(("", f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if fuzzy >= config.tau_fuzzy {
            matches.push(FuzzyScoredMatch {
                entity_id: entity.entity_id.clone(),
                surface: surface.to_string(),
                name: entity.name.raw.clone(),
                kind: entity.kind,
                vertical: entity.vertical.clone(),
                cosine: candidate.cosine,
                fuzzy,
            });
        }
    }
    matches.sort_by(|a, b| {
        b.fuzzy
            .total_cmp(&a.fuzzy)
            .then_with(|| b.cosine.total_cmp(&a.cosine))
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    Ok(CatalogEvidence { matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lev(a: &str, b: &str) -> usize {
        levenshtein(&a.chars().collect::<Vec<_>>(), &b.chars().collect::<Vec<_>>())
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(lev("", ""), 0);
        assert_eq!(lev("abc", ""), 3);
        assert_eq!(lev("kitten", "sitting"), 3);
        assert_eq!(lev("ab", "ba"), 2);
        assert_eq!(lev("flaw", "lawn"), 2);
    }

    #[test]
    fn token_set_examples() {
        assert_eq!(token_set_score("wildflower", "wildflower"), 1.0);
        assert_eq!(token_set_score("chew better", "better chew"), 1.0);
        assert_eq!(token_set_score("", ""), 1.0);
        // I and A are both empty here, and two empty strings are identical.
        assert_eq!(token_set_score("", "abc"), 1.0);
        assert_eq!(token_set_score("chew", "chew toy deluxe"), 1.0);
    }

    #[test]
    fn partial_ratio_examples() {
        assert_eq!(partial_ratio_score("wild", "wildflower"), 1.0);
        assert_eq!(partial_ratio_score("abc", "xyz"), 0.0);
        assert_eq!(partial_ratio_score("450 north", "450 north craft ales"), 1.0);
        assert_eq!(partial_ratio_score("", "abc"), 0.0);
        assert_eq!(partial_ratio_score("", ""), 1.0);
    }

    #[test]
    fn fuzzy_blend_degenerates() {
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            assert_eq!(fuzzy_score("taco loco", "taco loco", alpha), 1.0);
        }
        let (q, e) = ("better chew", "chew toy deluxe");
        assert_eq!(fuzzy_score(q, e, 1.0), token_set_score(q, e));
        assert_eq!(fuzzy_score(q, e, 0.0), partial_ratio_score(q, e));
    }

    proptest! {
        #[test]
        fn scores_bounded_and_symmetric(q in "[a-c ]{0,12}", e in "[a-c ]{0,12}", alpha in 0.0f64..=1.0) {
            let s = fuzzy_score(&q, &e, alpha);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((s - fuzzy_score(&e, &q, alpha)).abs() < 1e-12);
        }
    }
}
