//! `groundintent` command-line driver.
//!
//! Every subcommand reads an optional TOML config file; flags override the
//! file, and unset values fall back to built-in defaults.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use groundintent::catalog::{load_catalog_with_build, VerticalId};
use groundintent::config::{AppConfig, EncoderConfig, EngineConfig, MissPolicy, SearchConfig};
use groundintent::eval::{self, derive_whitelist, load_benchmark, render_table, SyntheticBenchmark};
use groundintent::pipeline::{batch_run, classify_query, AgenticMode, BatchError, CacheStore};
use groundintent::retrieval::build_index;
use groundintent::service::{serve, ServeConfig};

/// Writes to stdout, surfacing a closed pipe as an error instead of panicking.
macro_rules! outln {
    ($($t:tt)*) => { writeln!(io::stdout().lock(), $($t)*)? };
}

macro_rules! out {
    ($($t:tt)*) => { write!(io::stdout().lock(), $($t)*)? };
}

#[derive(Parser)]
#[command(name = "groundintent", version, about = "Grounded query-intent classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode every catalog surface and write the semantic index.
    BuildIndex {
        #[command(flatten)]
        common: CommonArgs,
        /// Output index file; defaults to `data.index` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a query log and append results to the intent cache.
    Batch {
        #[command(flatten)]
        common: CommonArgs,
        /// One raw query per line.
        #[arg(long)]
        queries: PathBuf,
        /// Cache file (JSON lines), created if missing.
        #[arg(long)]
        cache: PathBuf,
        /// Worker threads; defaults to the number of available cores.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Also write the BatchReport JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify queries given on the command line and print the results.
    Classify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(required = true)]
        queries: Vec<String>,
    },
    /// Serve cached intents over HTTP until interrupted.
    Serve {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        serve: ServeArgs,
    },
    /// Accuracy of the configured pipeline on a labeled benchmark.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Benchmark cases, one `{query, truth, segment}` JSON object per line.
        #[arg(long)]
        benchmark: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Four-arm ablation: Baseline, +Catalog, +Agentic, Full.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build the conflict whitelist from historical conflict outcomes.
    DeriveWhitelist {
        #[command(flatten)]
        common: CommonArgs,
        /// One `{primary, secondary, winner}` JSON object per line.
        #[arg(long)]
        interactions: PathBuf,
        /// Minimum secondary win rate, in (0.5, 1].
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Minimum observations per pair.
        #[arg(long, default_value_t = eval::DEFAULT_MIN_SUPPORT)]
        min_support: usize,
        /// Version label stamped on the whitelist.
        #[arg(long = "whitelist-version", default_value = "derived")]
        version: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic benchmark corpus and a config for it.
    GenBenchmark {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Cases per family (four families).
        #[arg(long, default_value_t = 80)]
        per_family: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ModelDecides,
    OnEmptyCatalog,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MissArg {
    DefaultVertical,
    Error404,
}

/// Data, retrieval and reasoning settings shared by all pipeline commands.
#[derive(Args)]
struct CommonArgs {
    /// TOML config file; relative paths inside it resolve against its directory.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Taxonomy JSON.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Catalog JSON lines.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Catalog build number recorded in the store version [default: 1].
    #[arg(long)]
    store_build: Option<u64>,
    /// Prebuilt index; built in memory when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Conflict whitelist JSON [default: empty].
    #[arg(long)]
    whitelist: Option<PathBuf>,
    /// Strategic rules and examples JSON.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Scripted engine rules JSON; selects the scripted engine.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Search fixtures JSON; selects the fixture search tool.
    #[arg(long)]
    search_fixtures: Option<PathBuf>,
    /// Hash encoder dimension [default: 256].
    #[arg(long)]
    encoder_dim: Option<usize>,
    /// Hash encoder seed [default: 7].
    #[arg(long)]
    encoder_seed: Option<u64>,
    /// Semantic candidates kept per query [default: 50].
    #[arg(long)]
    top_n: Option<usize>,
    /// Token-set weight in the fuzzy blend [default: 0.6].
    #[arg(long)]
    alpha: Option<f64>,
    /// Minimum fuzzy score for catalog evidence [default: 0.75].
    #[arg(long)]
    tau_fuzzy: Option<f64>,
    /// Search calls allowed per query [default: 2].
    #[arg(long)]
    max_tool_calls: Option<usize>,
    /// Snippets kept per query [default: 5].
    #[arg(long)]
    max_snippets: Option<usize>,
    /// Per-search timeout in milliseconds [default: 10000].
    #[arg(long)]
    tool_timeout_ms: Option<u64>,
    /// When search is offered [default: on-empty-catalog].
    #[arg(long, value_enum)]
    agentic_mode: Option<ModeArg>,
    /// Fallback vertical of the scripted engine.
    #[arg(long)]
    default_vertical: Option<String>,
    /// Disable catalog grounding.
    #[arg(long)]
    no_catalog: bool,
    /// Disable agentic search.
    #[arg(long)]
    no_agentic: bool,
    /// Keep only the primary intent.
    #[arg(long)]
    no_dual_intent: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address [default: 127.0.0.1:8080].
    #[arg(long)]
    bind: Option<String>,
    /// Cache file to serve.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Behavior for uncached queries [default: error404].
    #[arg(long, value_enum)]
    miss_policy: Option<MissArg>,
    /// Vertical returned on a miss under the default-vertical policy.
    #[arg(long)]
    fallback_vertical: Option<String>,
    /// Environment variable holding the admin token for reload routes.
    #[arg(long)]
    admin_token_env: Option<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<AppConfig> {
        let mut config = match &self.config {
            Some(path) => AppConfig::load(path)?,
            None => AppConfig {
                base_dir: std::env::current_dir()?,
                ..AppConfig::default()
            },
        };
        let cwd = std::env::current_dir()?;
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { cwd.join(p) };
        let data = &mut config.data;
        set_opt(&mut data.taxonomy, self.taxonomy.as_ref().map(abs));
        set_opt(&mut data.catalog, self.catalog.as_ref().map(abs));
        set_opt(&mut data.index, self.index.as_ref().map(abs));
        set_opt(&mut data.whitelist, self.whitelist.as_ref().map(abs));
        set_opt(&mut data.policy, self.policy.as_ref().map(abs));
        set_opt(&mut data.store_build, self.store_build);
        if let Some(rules) = &self.rules {
            config.engine = Some(EngineConfig::Scripted { rules: abs(rules) });
        }
        if let Some(path) = &self.search_fixtures {
            config.search = SearchConfig::Fixture { path: Some(abs(path)) };
        }
        if self.encoder_dim.is_some() || self.encoder_seed.is_some() {
            let (dimension, seed) = match config.encoder {
                EncoderConfig::Hash { dimension, seed } => (dimension, seed),
                EncoderConfig::Http { .. } => bail!("--encoder-dim/--encoder-seed apply to the hash encoder only"),
            };
            config.encoder = EncoderConfig::Hash {
                dimension: self.encoder_dim.unwrap_or(dimension),
                seed: self.encoder_seed.unwrap_or(seed),
            };
        }
        let p = &mut config.pipeline;
        set(&mut p.retrieval.top_n, self.top_n);
        set(&mut p.retrieval.alpha, self.alpha);
        set(&mut p.retrieval.tau_fuzzy, self.tau_fuzzy);
        set(&mut p.budget.max_tool_calls, self.max_tool_calls);
        set(&mut p.budget.max_snippets, self.max_snippets);
        set(
            &mut p.budget.per_call_timeout,
            self.tool_timeout_ms.map(std::time::Duration::from_millis),
        );
        set(
            &mut p.agentic_mode,
            self.agentic_mode.map(|m| match m {
                ModeArg::ModelDecides => AgenticMode::ModelDecides,
                ModeArg::OnEmptyCatalog => AgenticMode::OnEmptyCatalog,
                ModeArg::Off => AgenticMode::Off,
            }),
        );
        if let Some(v) = &self.default_vertical {
            p.default_vertical = Some(VerticalId::new(v.as_str()));
        }
        p.ablation.catalog_grounding &= !self.no_catalog;
        p.ablation.agentic_search &= !self.no_agentic;
        p.ablation.dual_intent &= !self.no_dual_intent;
        p.retrieval.validate()?;
        Ok(config)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildIndex { common, out } => {
            let config = common.load()?;
            let out = out
                .or_else(|| config.data.index.as_ref().map(|p| config.resolve(p)))
                .context("no output path: pass --out or set data.index")?;
            let taxonomy = config.load_taxonomy()?;
            let catalog = config.data.catalog.as_ref().context("no catalog: pass --catalog or set data.catalog")?;
            let store = load_catalog_with_build(
                open(&config.resolve(catalog))?,
                taxonomy,
                config.data.store_build.unwrap_or(1),
            )?;
            let encoder = config.build_encoder()?;
            let index = build_index(&store, encoder.as_ref())?;
            let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            index.write_to(&mut w)?;
            w.flush()?;
            outln!(
                "{} entries for {} entities, store {}, encoder {} -> {}",
                index.entries().len(),
                index.distinct_entities(),
                index.store_version(),
                index.encoder_identity(),
                out.display()
            );
        }
        Command::Batch {
            common,
            queries,
            cache,
            parallelism,
            report,
        } => {
            let config = common.load()?;
            let deps = config.build_deps()?;
            let store = CacheStore::create_or_open(&cache, deps.cache_header(&config.pipeline))
                .with_context(|| format!("opening cache {}", cache.display()))?;
            let parallelism = parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let result = batch_run(open(&queries)?, &deps, &config.pipeline, &store, parallelism);
            let batch_report = match result {
                Ok(r) => r,
                Err(BatchError::Aborted { partial, source }) => {
                    outln!("{}", serde_json::to_string_pretty(&partial)?);
                    bail!("batch aborted: {source}; rerun to resume");
                }
                Err(e) => return Err(e.into()),
            };
            outln!("{}", serde_json::to_string_pretty(&batch_report)?);
            if let Some(path) = report {
                write_json(&path, &batch_report)?;
            }
        }
        Command::Classify { common, queries } => {
            let config = common.load()?;
            let deps = config.build_deps()?;
            let mut failed = false;
            for q in queries {
                match classify_query(&q, &deps, &config.pipeline) {
                    Ok(c) => outln!("{}", serde_json::to_string(&c.to_record(&deps.pipeline_version(&config.pipeline)))?),
                    Err(e) => {
                        failed = true;
                        eprintln!("{q:?}: {} ({})", e, e.class());
                    }
                }
            }
            if failed {
                bail!("some queries failed");
            }
        }
        Command::Serve { common, serve: args } => {
            let mut config = common.load()?;
            let s = &mut config.serve;
            set(&mut s.bind, args.bind);
            set_opt(&mut s.cache, args.cache.map(|p| std::env::current_dir().map(|d| d.join(p))).transpose()?);
            set(
                &mut s.miss_policy,
                args.miss_policy.map(|m| match m {
                    MissArg::DefaultVertical => MissPolicy::DefaultVertical,
                    MissArg::Error404 => MissPolicy::Error404,
                }),
            );
            set_opt(&mut s.default_vertical, args.fallback_vertical.map(VerticalId::new));
            set_opt(&mut s.admin_token_env, args.admin_token_env);
            if let Some(w) = &common.whitelist {
                s.whitelist = Some(std::env::current_dir()?.join(w));
            }
            let s = &config.serve;
            let admin_token = match &s.admin_token_env {
                Some(var) => Some(std::env::var(var).with_context(|| format!("admin token variable {var} is not set"))?),
                None => None,
            };
            let serve_config = ServeConfig {
                bind: s.bind.parse().with_context(|| format!("bad bind address {:?}", s.bind))?,
                miss_policy: s.miss_policy,
                default_vertical: s.default_vertical.clone(),
                cache_path: config.resolve(s.cache.as_ref().context("no cache: pass --cache or set serve.cache")?),
                whitelist_path: s
                    .whitelist
                    .as_ref()
                    .or(config.data.whitelist.as_ref())
                    .map(|p| config.resolve(p)),
                taxonomy: config.load_taxonomy()?,
                admin_token,
            };
            let runtime = tokio_runtime()?;
            runtime.block_on(serve(serve_config))?;
        }
        Command::Eval { common, benchmark, json } => {
            let config = common.load()?;
            let deps = config.build_deps()?;
            let cases = load_benchmark(open(&benchmark)?, deps.store.taxonomy())?;
            let report = eval::evaluate(&cases, &deps, &config.pipeline);
            out!("{}", render_table(&report));
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Command::Ablate { common, benchmark, json } => {
            let config = common.load()?;
            let deps = config.build_deps()?;
            let cases = load_benchmark(open(&benchmark)?, deps.store.taxonomy())?;
            let report = eval::run_ablation(&cases, &deps, &config.pipeline);
            out!("{}", render_table(&report));
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Command::DeriveWhitelist {
            common,
            interactions,
            threshold,
            min_support,
            version,
            out,
        } => {
            let config = common.load()?;
            let taxonomy = config.load_taxonomy()?;
            let (whitelist, stats) = derive_whitelist(open(&interactions)?, threshold, min_support, &taxonomy, &version)?;
            for s in &stats {
                eprintln!(
                    "{:>14} -> {:<14} n={:<5} win_rate={:.3} {}",
                    s.primary.as_str(),
                    s.secondary.as_str(),
                    s.observations,
                    s.win_rate,
                    if s.included { "included" } else { "excluded" }
                );
            }
            let doc = whitelist.to_document();
            match out {
                Some(path) => write_json(&path, &doc)?,
                None => outln!("{}", serde_json::to_string_pretty(&doc)?),
            }
        }
        Command::GenBenchmark { seed, per_family, out } => {
            let bench = SyntheticBenchmark::generate(seed, per_family);
            bench.write_to(&out)?;
            outln!("{} cases, {} entities -> {}", bench.cases.len(), bench.catalog.len(), out.display());
        }
    }
    Ok(())
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e:#}");
            ExitCode::from(1)
        }
    }
}
