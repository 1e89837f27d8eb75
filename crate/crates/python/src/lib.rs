//! Python bindings: text scoring, intent resolution and a config-driven classifier.

use std::io::Cursor;

use groundintent::catalog::{normalize_text as normalize, Taxonomy as CoreTaxonomy, VerticalId};
use groundintent::config::AppConfig;
use groundintent::disambiguation::{load_whitelist, resolve as core_resolve, ConflictWhitelist};
use groundintent::fuzzy;
use groundintent::pipeline::CacheStore;
use groundintent::pipeline::{batch_run, classify_query, PipelineConfig, PipelineDeps};
use groundintent::reasoner::IntentTuple;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Case-folds, NFKC-normalizes and collapses whitespace.
#[pyfunction]
fn normalize_text(raw: &str) -> String {
    normalize(raw)
}

#[pyfunction]
fn token_set_score(q: &str, e: &str) -> f64 {
    fuzzy::token_set_score(q, e)
}

#[pyfunction]
fn partial_ratio_score(q: &str, e: &str) -> f64 {
    fuzzy::partial_ratio_score(q, e)
}

#[pyfunction]
#[pyo3(signature = (q, e, alpha = 0.6))]
fn fuzzy_score(q: &str, e: &str, alpha: f64) -> PyResult<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(value_err("alpha must be in [0, 1]"));
    }
    Ok(fuzzy::fuzzy_score(q, e, alpha))
}

#[pyclass(frozen)]
struct Taxonomy {
    inner: CoreTaxonomy,
}

#[pymethods]
impl Taxonomy {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreTaxonomy::from_json(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.verticals().iter().map(|v| v.id.as_str().to_string()).collect()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn __len__(&self) -> usize {
        self.inner.verticals().len()
    }
}

#[pyclass(frozen)]
struct Whitelist {
    inner: ConflictWhitelist,
    taxonomy: CoreTaxonomy,
}

#[pymethods]
impl Whitelist {
    #[staticmethod]
    fn from_json(text: &str, taxonomy: &Taxonomy) -> PyResult<Self> {
        let inner = load_whitelist(text, &taxonomy.inner).map_err(value_err)?;
        Ok(Self {
            inner,
            taxonomy: taxonomy.inner.clone(),
        })
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version().to_string()
    }

    fn pairs(&self) -> Vec<(String, String)> {
        self.inner
            .pairs()
            .map(|(p, s)| (p.as_str().to_string(), s.as_str().to_string()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Resolves an intent tuple and returns (final_vertical, rule_fired).
    #[pyo3(signature = (primary, secondary = None))]
    fn resolve(&self, primary: &str, secondary: Option<&str>) -> PyResult<(String, String)> {
        let tuple = IntentTuple::new(VerticalId::new(primary), secondary.map(VerticalId::new), &self.taxonomy)
            .map_err(value_err)?;
        let r = core_resolve(&tuple, &self.inner);
        let rule = serde_json::to_value(r.rule_fired).map_err(value_err)?;
        Ok((r.final_vertical.as_str().to_string(), rule.as_str().unwrap_or_default().to_string()))
    }
}

/// A pipeline assembled from a TOML config file.
#[pyclass(frozen)]
struct Classifier {
    deps: PipelineDeps,
    config: PipelineConfig,
}

#[pymethods]
impl Classifier {
    #[new]
    fn new(config_path: &str) -> PyResult<Self> {
        let app = AppConfig::load(config_path).map_err(value_err)?;
        let deps = app.build_deps().map_err(value_err)?;
        Ok(Self {
            deps,
            config: app.pipeline,
        })
    }

    #[getter]
    fn pipeline_version(&self) -> String {
        self.deps.pipeline_version(&self.config)
    }

    /// Classifies one query and returns the record as a JSON string.
    fn classify(&self, py: Python<'_>, query: &str) -> PyResult<String> {
        let record = py
            .detach(|| classify_query(query, &self.deps, &self.config))
            .map_err(|e| PyRuntimeError::new_err(format!("{} ({})", e, e.class())))?
            .to_record(&self.deps.pipeline_version(&self.config));
        serde_json::to_string(&record).map_err(value_err)
    }

    /// Classifies distinct queries and returns (report_json, records_jsonl).
    #[pyo3(signature = (queries, parallelism = 1))]
    fn batch(&self, py: Python<'_>, queries: Vec<String>, parallelism: usize) -> PyResult<(String, String)> {
        let sink = CacheStore::in_memory(self.deps.cache_header(&self.config));
        let input = queries.join("\n");
        let report = py
            .detach(|| batch_run(Cursor::new(input), &self.deps, &self.config, &sink, parallelism))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let mut out = Vec::new();
        sink.export_jsonl(&mut out).map_err(value_err)?;
        Ok((
            serde_json::to_string(&report).map_err(value_err)?,
            String::from_utf8(out).map_err(value_err)?,
        ))
    }
}

/// Adds every binding to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(token_set_score, m)?)?;
    m.add_function(wrap_pyfunction!(partial_ratio_score, m)?)?;
    m.add_function(wrap_pyfunction!(fuzzy_score, m)?)?;
    m.add_class::<Taxonomy>()?;
    m.add_class::<Whitelist>()?;
    m.add_class::<Classifier>()?;
    Ok(())
}

#[pymodule]
fn groundintent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
