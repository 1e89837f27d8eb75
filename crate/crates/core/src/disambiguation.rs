//! Resolution of a dual-intent tuple to one vertical.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Taxonomy, VerticalId};
use crate::reasoner::IntentTuple;

#[derive(Debug, Error)]
pub enum WhitelistError {
    #[error("whitelist parse error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("pair {index}: unknown vertical {vertical:?}")]
    UnknownVertical { index: usize, vertical: String },
    #[error("pair {index}: self-pair ({vertical}, {vertical})")]
    SelfPair { index: usize, vertical: String },
}

/// Directed pairs `(primary, secondary)` for which the secondary wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictWhitelist {
    pairs: BTreeSet<(VerticalId, VerticalId)>,
    version: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WhitelistPair {
    pub primary: String,
    pub secondary: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct WhitelistDocument {
    #[serde(default)]
    pub version: String,
    #[serde(default)]
    pub pairs: Vec<WhitelistPair>,
}

impl ConflictWhitelist {
    pub fn new(
        version: impl Into<String>,
        pairs: impl IntoIterator<Item = (VerticalId, VerticalId)>,
        taxonomy: &Taxonomy,
    ) -> Result<Self, WhitelistError> {
        let mut set = BTreeSet::new();
        for (index, (p, s)) in pairs.into_iter().enumerate() {
            for v in [&p, &s] {
                if !taxonomy.contains(v.as_str()) {
                    return Err(WhitelistError::UnknownVertical {
                        index,
                        vertical: v.to_string(),
                    });
                }
            }
            if p == s {
                return Err(WhitelistError::SelfPair {
                    index,
                    vertical: p.to_string(),
                });
            }
            set.insert((p, s));
        }
        Ok(Self {
            pairs: set,
            version: version.into(),
        })
    }

    pub fn empty(version: impl Into<String>) -> Self {
        Self {
            pairs: BTreeSet::new(),
            version: version.into(),
        }
    }

    pub fn contains(&self, primary: &VerticalId, secondary: &VerticalId) -> bool {
        // BTreeSet<(A, B)> has no borrowed-tuple lookup; pairs are few.
        self.pairs.iter().any(|(p, s)| p == primary && s == secondary)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(VerticalId, VerticalId)> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn to_document(&self) -> WhitelistDocument {
        WhitelistDocument {
            version: self.version.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|(p, s)| WhitelistPair {
                    primary: p.to_string(),
                    secondary: s.to_string(),
                })
                .collect(),
        }
    }
}

/// Parses `{"version": .., "pairs": [{"primary": .., "secondary": ..}]}`.
/// An empty or whitespace-only document is an empty whitelist.
pub fn load_whitelist(source: &str, taxonomy: &Taxonomy) -> Result<ConflictWhitelist, WhitelistError> {
    let doc: WhitelistDocument = if source.trim().is_empty() {
        WhitelistDocument::default()
    } else {
        serde_json::from_str(source)?
    };
    ConflictWhitelist::new(
        doc.version,
        doc.pairs
            .into_iter()
            .map(|p| (VerticalId::new(p.primary), VerticalId::new(p.secondary))),
        taxonomy,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleFired {
    NoSecondary,
    Override,
    PrimaryDefault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedIntent {
    #[serde(rename = "final")]
    pub final_vertical: VerticalId,
    pub tuple: IntentTuple,
    pub rule_fired: RuleFired,
    pub whitelist_version: String,
}

/// A pluggable resolution policy. The output vertical must be one of the
/// tuple's members.
pub trait ResolutionPolicy: Send + Sync {
    fn resolve(&self, tuple: &IntentTuple) -> ResolvedIntent;
}

impl ResolutionPolicy for ConflictWhitelist {
    fn resolve(&self, tuple: &IntentTuple) -> ResolvedIntent {
        resolve(tuple, self)
    }
}

pub fn resolve(tuple: &IntentTuple, whitelist: &ConflictWhitelist) -> ResolvedIntent {
    let (final_vertical, rule_fired) = match &tuple.secondary {
        None => (tuple.primary.clone(), RuleFired::NoSecondary),
        Some(s) if whitelist.contains(&tuple.primary, s) => (s.clone(), RuleFired::Override),
        Some(_) => (tuple.primary.clone(), RuleFired::PrimaryDefault),
    };
    ResolvedIntent {
        final_vertical,
        tuple: tuple.clone(),
        rule_fired,
        whitelist_version: whitelist.version.clone(),
    }
}
