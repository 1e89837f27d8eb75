//! Operator configuration file and assembly of a [`PipelineDeps`] from it.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{load_catalog_with_build, Taxonomy, VerticalId};
use crate::disambiguation::{load_whitelist, ConflictWhitelist};
use crate::pipeline::{PipelineConfig, PipelineDeps};
use crate::providers::{live_encoder, live_engine, live_search, ProviderConfig};
use crate::reasoner::{scripted_engine, FixtureSearchTool, PolicyContext, ReasoningEngine, ScriptedRules, SearchTool};
use crate::retrieval::{build_index, hash_encoder, Encoder, SemanticIndex};

#[derive(Debug, Error)]
#[error("{context}: {source}")]
pub struct ConfigError {
    pub context: String,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl ConfigError {
    pub fn new(context: impl Into<String>, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            context: context.into(),
            source: source.into(),
        }
    }
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, ConfigError>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, ConfigError> {
        self.map_err(|e| ConfigError::new(what(), e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub taxonomy: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub store_build: Option<u64>,
    /// Prebuilt index; built in memory when absent.
    pub index: Option<PathBuf>,
    pub whitelist: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Hash { dimension: usize, seed: u64 },
    Http { dimension: usize, provider: ProviderConfig },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hash { dimension: 256, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineConfig {
    Scripted { rules: PathBuf },
    Http { provider: ProviderConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchConfig {
    Fixture { path: Option<PathBuf> },
    Http { provider: ProviderConfig },
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig::Fixture { path: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    DefaultVertical,
    Error404,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    pub miss_policy: MissPolicy,
    pub default_vertical: Option<VerticalId>,
    pub cache: Option<PathBuf>,
    pub whitelist: Option<PathBuf>,
    pub admin_token_env: Option<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            miss_policy: MissPolicy::Error404,
            default_vertical: None,
            cache: None,
            whitelist: None,
            admin_token_env: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataPaths,
    pub pipeline: PipelineConfig,
    pub encoder: EncoderConfig,
    pub engine: Option<EngineConfig>,
    pub search: SearchConfig,
    pub serve: ServeSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AppConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut config: AppConfig = toml::from_str(text).context(|| "config".to_string())?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| ConfigError::new(format!("{}", path.display()), e))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn required(&self, path: &Option<PathBuf>, what: &str) -> Result<PathBuf, ConfigError> {
        path.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| ConfigError::new(what.to_string(), "path not configured"))
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy, ConfigError> {
        let path = self.required(&self.data.taxonomy, "data.taxonomy")?;
        let text = read(&path)?;
        Taxonomy::from_json(&text).context(|| path.display().to_string())
    }

    pub fn load_whitelist(&self, taxonomy: &Taxonomy) -> Result<ConflictWhitelist, ConfigError> {
        match &self.data.whitelist {
            None => Ok(ConflictWhitelist::empty("none")),
            Some(p) => {
                let path = self.resolve(p);
                load_whitelist(&read(&path)?, taxonomy).context(|| path.display().to_string())
            }
        }
    }

    pub fn build_encoder(&self) -> Result<Arc<dyn Encoder>, ConfigError> {
        Ok(match &self.encoder {
            EncoderConfig::Hash { dimension, seed } => {
                Arc::new(hash_encoder(*dimension, *seed).context(|| "encoder".to_string())?)
            }
            EncoderConfig::Http { dimension, provider } => Arc::new(live_encoder(provider.clone(), *dimension)),
        })
    }

    pub fn build_engine(&self, taxonomy: &Taxonomy) -> Result<Arc<dyn ReasoningEngine>, ConfigError> {
        let engine = self
            .engine
            .as_ref()
            .ok_or_else(|| ConfigError::new("engine", "no [engine] section"))?;
        Ok(match engine {
            EngineConfig::Scripted { rules } => {
                let path = self.resolve(rules);
                let mut rules: ScriptedRules =
                    serde_json::from_str(&read(&path)?).context(|| path.display().to_string())?;
                if let Some(v) = &self.pipeline.default_vertical {
                    rules.default_vertical = v.clone();
                }
                Arc::new(scripted_engine(rules, taxonomy).context(|| path.display().to_string())?)
            }
            EngineConfig::Http { provider } => Arc::new(live_engine(provider.clone())),
        })
    }

    pub fn build_search(&self) -> Result<Arc<dyn SearchTool>, ConfigError> {
        Ok(match &self.search {
            SearchConfig::Fixture { path: None } => Arc::new(FixtureSearchTool::default()),
            SearchConfig::Fixture { path: Some(p) } => {
                let path = self.resolve(p);
                Arc::new(FixtureSearchTool::from_json(&read(&path)?).context(|| path.display().to_string())?)
            }
            SearchConfig::Http { provider } => Arc::new(live_search(provider.clone())),
        })
    }

    /// Loads data files and constructs every dependency of the pipeline.
    pub fn build_deps(&self) -> Result<PipelineDeps, ConfigError> {
        self.pipeline
            .retrieval
            .validate()
            .context(|| "pipeline.retrieval".to_string())?;
        let taxonomy = self.load_taxonomy()?;
        let catalog_path = self.required(&self.data.catalog, "data.catalog")?;
        let file = File::open(&catalog_path).context(|| catalog_path.display().to_string())?;
        let store = load_catalog_with_build(BufReader::new(file), taxonomy.clone(), self.data.store_build.unwrap_or(1))
            .context(|| catalog_path.display().to_string())?;
        let encoder = self.build_encoder()?;
        let index = match &self.data.index {
            Some(p) if self.resolve(p).exists() => {
                let path = self.resolve(p);
                let file = File::open(&path).context(|| path.display().to_string())?;
                SemanticIndex::read_from(BufReader::new(file), &store, encoder.as_ref())
                    .context(|| path.display().to_string())?
            }
            _ => build_index(&store, encoder.as_ref()).context(|| "building index".to_string())?,
        };
        let policy = match &self.data.policy {
            None => PolicyContext::default(),
            Some(p) => {
                let path = self.resolve(p);
                PolicyContext::from_json(&read(&path)?, &taxonomy).context(|| path.display().to_string())?
            }
        };
        Ok(PipelineDeps {
            whitelist: Arc::new(self.load_whitelist(&taxonomy)?),
            engine: self.build_engine(&taxonomy)?,
            tool: self.build_search()?,
            store: Arc::new(store),
            index: Arc::new(index),
            encoder,
            policy: Arc::new(policy),
        })
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))
}
