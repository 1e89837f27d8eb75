//! Grounded query-intent classification.
//!
//! Queries are matched against a vertical-labeled entity catalog, classified
//! by a reasoning engine into a primary and optional secondary vertical, and
//! resolved to one final vertical through a conflict whitelist. Results are
//! computed in batch, cached, and served from a read-only lookup service.

pub mod catalog;
pub mod config;
pub mod disambiguation;
pub mod eval;
pub mod fuzzy;
pub mod pipeline;
pub mod providers;
pub mod reasoner;
pub mod retrieval;
pub mod service;

pub use catalog::{normalize_text, EntityStore, Query, Segment, Taxonomy, VerticalId};
pub use disambiguation::{resolve, ConflictWhitelist, ResolvedIntent, RuleFired};
pub use pipeline::{batch_run, classify_query, PipelineConfig, PipelineDeps};
pub use reasoner::IntentTuple;
