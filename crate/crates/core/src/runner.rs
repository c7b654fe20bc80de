//! Experiment orchestration: sampling, profile generation, decoding, NMF
//! fits, scoring, and a resumable on-disk run directory.
//!
//! Run directory:
//!
//! ```text
//! config.snapshot      resolved config (TOML); its SHA-256 is the config hash
//! manifest.jsonl       header line, then one line per task instance
//! records/*.jsonl      profiles, per-method records, skips, NMF timings
//! metrics.csv/.json    aggregated cells
//! runtime.csv          stage timing table
//! cache/               response cache (unless configured elsewhere)
//! ```
//!
//! Work is processed in a fixed order and records are appended in that
//! order, so an interrupted run that is resumed ends with the same files as
//! one that never stopped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    BackendClient, BackendError, CompletionRecord, GenerationParams, Generator, HttpBackend, HttpConfig, MockBackend,
    ResponseCache, RetryPolicy,
};
use crate::catalog::{
    self, load_catalog, load_ratings, ratings_by_user, select_typical_users, CatalogError, MovieCatalog, MovieId,
    PoolConfig, RatingEvent, RatingsFormat, UserId,
};
use crate::eval::{
    self, aggregate, method_label, score_prediction, score_verdict, CellKey, GroupBy, Imputation, MetricsCell,
    Method, ScoredInstance,
};
use crate::extract::{extract_choice, extract_preference, extract_rating, Answer, Prediction};
use crate::nmf::{self, FactorModel, NmfConfig, Observation, PairVerdict, CHOICE_CLIP, RATING_CLIP};
use crate::prompting::{
    render_preference_followup, render_summarize_prompt, render_task_prompt, ChatWrapper, ProfileText,
    PromptTemplateSet, TaskContext, DEFAULT_WORD_LIMITS,
};
use crate::sampler::{
    sample_task_instances, sample_unseen_pool, sample_user_histories, SamplerError, SamplingConfig, Side,
    SkipRecord, TaskInstance, TaskKind, UserSample,
};
use crate::synth::PersonaRegistry;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("manifest corrupt: {0}")]
    ManifestCorrupt(String),
    #[error("{0} already holds a run; use resume")]
    RunDirExists(PathBuf),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMode {
    #[default]
    SampleMean,
    CorpusMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataConfig {
    pub ratings: PathBuf,
    pub movies: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    /// Mock only.
    pub registry: Option<PathBuf>,
    /// Mock only: fraction of task prompts answered with a refusal.
    pub refusal_rate: f64,
    pub endpoint: String,
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub system_prompt: String,
    pub wrapper_prefix: String,
    pub wrapper_suffix: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub in_flight: usize,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendSettings {
    fn default() -> Self {
        let http = HttpConfig::default();
        let wrapper = ChatWrapper::default();
        let retry = RetryPolicy::default();
        BackendSettings {
            kind: BackendKind::Mock,
            registry: None,
            refusal_rate: 0.0,
            endpoint: http.endpoint,
            api_key_env: None,
            timeout_ms: http.timeout_ms,
            system_prompt: String::new(),
            wrapper_prefix: wrapper.prefix,
            wrapper_suffix: wrapper.suffix,
            max_retries: retry.max_retries,
            backoff_ms: retry.base_backoff_ms,
            in_flight: 4,
            cache_dir: None,
        }
    }
}

impl BackendSettings {
    pub fn wrapper(&self) -> ChatWrapper {
        ChatWrapper { prefix: self.wrapper_prefix.clone(), suffix: self.wrapper_suffix.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Copied into the pool, sampling and NMF seeds.
    pub seed: u64,
    pub methods: Vec<Method>,
    pub tasks: Vec<TaskKind>,
    pub profile_word_limits: Vec<usize>,
    pub background_sizes: Vec<usize>,
    pub imputation: ImputationMode,
    pub workers: usize,
    /// Directory of `<name>.txt` template overrides.
    pub templates_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub pool: PoolConfig,
    pub sampling: SamplingConfig,
    pub nmf: NmfConfig,
    pub generation: GenerationParams,
    pub backend: Option<BackendSettings>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("run"),
            seed: 0,
            methods: vec![Method::Lfm, Method::Direct, Method::Nmf, Method::Default],
            tasks: TaskKind::ALL.to_vec(),
            profile_word_limits: DEFAULT_WORD_LIMITS.to_vec(),
            background_sizes: vec![0, 300, 1200],
            imputation: ImputationMode::SampleMean,
            workers: 4,
            templates_dir: None,
            data: DataConfig::default(),
            pool: PoolConfig::default(),
            sampling: SamplingConfig::default(),
            nmf: NmfConfig::default(),
            generation: GenerationParams::default(),
            backend: None,
        }
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<ExperimentConfig, RunError> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        let base = std::path::absolute(base).map_err(|e| io_err(base, e))?;
        config.out_dir = resolve_path(&base, &config.out_dir);
        config.data.ratings = resolve_path(&base, &config.data.ratings);
        config.data.movies = resolve_path(&base, &config.data.movies);
        config.templates_dir = config.templates_dir.map(|p| resolve_path(&base, &p));
        if let Some(b) = &mut config.backend {
            b.registry = b.registry.as_ref().map(|p| resolve_path(&base, p));
            b.cache_dir = b.cache_dir.as_ref().map(|p| resolve_path(&base, p));
        }
        Ok(config)
    }

    pub fn from_toml_file(path: &Path) -> Result<ExperimentConfig, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    fn uses_llm(&self) -> bool {
        self.methods.iter().any(|m| matches!(m, Method::Lfm | Method::Direct))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods is empty");
        }
        if self.tasks.is_empty() {
            return bad("tasks is empty");
        }
        if self.methods.contains(&Method::Lfm) && self.profile_word_limits.is_empty() {
            return bad("LFM needs at least one profile word limit");
        }
        if self.methods.contains(&Method::Nmf) && self.background_sizes.is_empty() {
            return bad("NMF needs at least one background size");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.uses_llm() {
            let Some(b) = &self.backend else {
                return bad("LFM and Direct need a [backend] section");
            };
            if b.kind == BackendKind::Mock && b.registry.is_none() {
                return bad("the mock backend needs a registry path");
            }
            if !(0.0..=1.0).contains(&b.refusal_rate) {
                return bad("refusal_rate must lie in [0, 1]");
            }
            self.generation.validate()?;
        }
        self.nmf.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.sampling.validate(self.pool.exact_count)?;
        Ok(())
    }

    /// Applies the run seed and derives the mock model name. Idempotent.
    fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.pool.seed = c.seed;
        c.sampling.seed = c.seed;
        c.nmf.seed = c.seed;
        let mut methods = c.methods.clone();
        methods.sort();
        methods.dedup();
        c.methods = methods;
        let mut tasks = c.tasks.clone();
        tasks.sort();
        tasks.dedup();
        c.tasks = tasks;
        if let Some(b) = &c.backend {
            if b.kind == BackendKind::Mock {
                c.generation.model_name =
                    if b.refusal_rate > 0.0 { format!("mock+refusal{}", b.refusal_rate) } else { "mock".into() };
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    pub prompt_hash: String,
    pub output: String,
    pub latency_ms: u64,
    pub created_at: u64,
}

impl CallRecord {
    fn from_completion(stage: &str, c: &CompletionRecord) -> CallRecord {
        CallRecord {
            stage: stage.to_string(),
            prompt_hash: c.prompt_hash.clone(),
            output: c.output_text.clone(),
            latency_ms: c.latency_ms,
            created_at: c.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub sample_id: String,
    pub user: UserId,
    pub history_size: usize,
    pub repeat: usize,
    pub word_limit: usize,
    pub profile: Option<ProfileText>,
    pub call: Option<CallRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub user: UserId,
    pub repeat: usize,
    pub calls: Vec<CallRecord>,
    pub error: Option<String>,
    pub scored: ScoredInstance,
}

impl RunRecord {
    pub fn key(&self) -> &CellKey {
        &self.scored.key
    }

    fn record_key(&self) -> String {
        record_key(&self.scored.key, &self.instance_id)
    }
}

fn record_key(key: &CellKey, instance_id: &str) -> String {
    format!("{}|{}", method_label(key.method, key.profile_length, key.background_size), instance_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfTiming {
    pub history_size: usize,
    pub repeat: usize,
    pub background_size: usize,
    /// `ratings` or `choices`.
    pub variant: String,
    pub fit_ms: f64,
    pub predict_ms: f64,
    pub n_predictions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    config_hash: String,
    instances: usize,
}

/// Summary of a run directory after `run_experiment` or `resume`.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub dir: PathBuf,
    pub config_hash: String,
    pub n_instances: usize,
    pub n_records: usize,
    /// Records written by this invocation.
    pub new_records: usize,
    pub complete: bool,
    pub backend_calls: u64,
    pub metrics: Vec<MetricsCell>,
}

#[derive(Default, Clone)]
pub struct RunOptions {
    /// Stop after writing this many new records (profiles included).
    pub stop_after: Option<usize>,
    /// Replaces the generator built from the backend config.
    pub generator: Option<Arc<dyn Generator>>,
}

const SNAPSHOT: &str = "config.snapshot";
const MANIFEST: &str = "manifest.jsonl";
const RECORDS: &str = "records";
const PROFILES: &str = "profiles.jsonl";
const SKIPS: &str = "skips.jsonl";
const NMF_TIMING: &str = "nmf_timing.jsonl";

fn method_file(m: Method) -> String {
    format!("{}.jsonl", m.as_str())
}

pub fn config_hash(snapshot: &str) -> String {
    hex::encode(Sha256::digest(snapshot.as_bytes()))
}

/// Reads a JSONL file, dropping (and truncating away) a final line that was
/// cut off mid-write. A bad line anywhere else is corruption.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete_len < bytes.len() {
        log::warn!("{}: dropping partial last line", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
        f.set_len(complete_len as u64).map_err(|e| io_err(path, e))?;
    }
    let text = std::str::from_utf8(&bytes[..complete_len])
        .map_err(|_| RunError::ManifestCorrupt(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| RunError::ManifestCorrupt(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

struct Appender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Appender, RunError> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(Appender { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<(), RunError> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| io_err(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| io_err(&self.path, e))
    }

    fn flush(&mut self) -> Result<(), RunError> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("slots lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("slots lock").into_iter().map(|r| r.expect("every slot filled")).collect()
}

struct Budget(Option<usize>);

impl Budget {
    fn allow(&self, n: usize) -> usize {
        self.0.map_or(n, |left| left.min(n))
    }

    fn spend(&mut self, n: usize) {
        if let Some(left) = &mut self.0 {
            *left -= n.min(*left);
        }
    }

    fn exhausted(&self) -> bool {
        self.0 == Some(0)
    }
}

/// Everything derived deterministically from the data and config.
struct Plan {
    catalog: Arc<MovieCatalog>,
    ratings: Vec<RatingEvent>,
    pool: catalog::UserPool,
    samples: Vec<UserSample>,
    instances: Vec<TaskInstance>,
    skips: Vec<SkipRecord>,
    corpus_mean: f64,
}

fn plan(config: &ExperimentConfig) -> Result<Plan, RunError> {
    let ratings = load_ratings(&config.data.ratings, RatingsFormat::from_path(&config.data.ratings))?;
    let (catalog, warnings) = load_catalog(&config.data.movies)?;
    if !warnings.is_empty() {
        log::warn!("{} catalog warnings", warnings.len());
    }
    let pool = select_typical_users(&ratings, &config.pool)?;
    let samples = sample_user_histories(&pool, &ratings, &config.sampling)?;
    let set = sample_task_instances(&samples, &catalog, &config.sampling);
    let instances = set.instances.into_iter().filter(|i| config.tasks.contains(&i.kind())).collect();
    let skips = set.skips.into_iter().filter(|s| config.tasks.contains(&s.kind)).collect();
    let corpus_mean = ratings.iter().map(|e| e.rating.value()).sum::<f64>() / ratings.len().max(1) as f64;
    Ok(Plan { catalog: Arc::new(catalog), ratings, pool, samples, instances, skips, corpus_mean })
}

fn manifest_lines(plan: &Plan) -> Result<Vec<String>, RunError> {
    plan.instances
        .iter()
        .map(|i| serde_json::to_string(&i.manifest_entry()).map_err(|e| RunError::Config(e.to_string())))
        .collect()
}

fn build_client(config: &ExperimentConfig, catalog: &Arc<MovieCatalog>, opts: &RunOptions) -> Result<Option<BackendClient>, RunError> {
    if !config.uses_llm() {
        return Ok(None);
    }
    let settings = config.backend.clone().unwrap_or_default();
    let generator: Arc<dyn Generator> = match (&opts.generator, settings.kind) {
        (Some(g), _) => g.clone(),
        (None, BackendKind::Mock) => {
            let path = settings.registry.as_ref().ok_or_else(|| RunError::Config("mock backend needs a registry".into()))?;
            let registry = PersonaRegistry::load(path).map_err(|e| RunError::Config(e.to_string()))?;
            Arc::new(MockBackend::new(Arc::new(registry), catalog.clone(), settings.refusal_rate))
        }
        (None, BackendKind::Http) => Arc::new(HttpBackend::new(HttpConfig {
            endpoint: settings.endpoint.clone(),
            api_key_env: settings.api_key_env.clone(),
            timeout_ms: settings.timeout_ms,
            system_prompt: settings.system_prompt.clone(),
        })?),
    };
    let cache_dir = settings.cache_dir.clone().unwrap_or_else(|| config.out_dir.join("cache"));
    Ok(Some(BackendClient::new(
        generator,
        Some(ResponseCache::open(&cache_dir)?),
        settings.wrapper(),
        RetryPolicy { max_retries: settings.max_retries, base_backoff_ms: settings.backoff_ms },
        settings.in_flight,
    )))
}

/// Starts a fresh run in `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, RunError> {
    run_experiment_with(config, &RunOptions::default())
}

pub fn run_experiment_with(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let config = config.resolved();
    config.validate()?;
    let dir = config.out_dir.clone();
    if dir.join(MANIFEST).exists() {
        return Err(RunError::RunDirExists(dir));
    }
    std::fs::create_dir_all(dir.join(RECORDS)).map_err(|e| io_err(&dir, e))?;
    let plan = plan(&config)?;
    let snapshot = config.to_toml()?;
    let hash = config_hash(&snapshot);
    std::fs::write(dir.join(SNAPSHOT), &snapshot).map_err(|e| io_err(&dir.join(SNAPSHOT), e))?;

    let mut skips = Appender::open(&dir.join(RECORDS).join(SKIPS))?;
    for s in &plan.skips {
        skips.push(s)?;
    }
    skips.flush()?;

    // manifest last, so a directory without one is not a run yet
    let mut text = serde_json::to_string(&ManifestHeader { config_hash: hash.clone(), instances: plan.instances.len() })
        .map_err(|e| RunError::Config(e.to_string()))?;
    text.push('\n');
    for line in manifest_lines(&plan)? {
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(dir.join(MANIFEST), text).map_err(|e| io_err(&dir.join(MANIFEST), e))?;
    execute(&config, &plan, &hash, opts)
}

pub fn resume(dir: &Path) -> Result<RunManifest, RunError> {
    resume_with(dir, &RunOptions::default())
}

/// Finishes whatever records are missing from an existing run directory.
pub fn resume_with(dir: &Path, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let snapshot_path = dir.join(SNAPSHOT);
    let snapshot = std::fs::read_to_string(&snapshot_path).map_err(|e| io_err(&snapshot_path, e))?;
    let hash = config_hash(&snapshot);
    let manifest_path = dir.join(MANIFEST);
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut lines = manifest.lines();
    let header: ManifestHeader = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| RunError::ManifestCorrupt("missing header".into()))?;
    if header.config_hash != hash {
        return Err(RunError::ManifestCorrupt(format!(
            "config hash {} does not match manifest {}",
            hash, header.config_hash
        )));
    }
    let mut config: ExperimentConfig = toml::from_str(&snapshot).map_err(|e| RunError::ManifestCorrupt(e.to_string()))?;
    config.out_dir = dir.to_path_buf();
    config.validate()?;
    let plan = plan(&config)?;
    let expected = manifest_lines(&plan)?;
    let found: Vec<&str> = lines.collect();
    if found.len() != header.instances || found != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(RunError::ManifestCorrupt("task instances differ from the manifest".into()));
    }
    execute(&config, &plan, &hash, opts)
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    plan: &'a Plan,
    templates: PromptTemplateSet,
    client: Option<BackendClient>,
    samples: HashMap<&'a str, &'a UserSample>,
    imputation: Imputation,
}

impl Ctx<'_> {
    fn history(&self, instance: &TaskInstance) -> &[RatingEvent] {
        self.samples.get(instance.sample_id.as_str()).map(|s| s.history.as_slice()).unwrap_or(&[])
    }

    fn generate(&self, stage: &str, prompt: &str) -> Result<CallRecord, BackendError> {
        let client = self.client.as_ref().ok_or_else(|| BackendError::BackendUnavailable("no backend configured".into()))?;
        client.generate(prompt, &self.config.generation).map(|c| CallRecord::from_completion(stage, &c))
    }
}

fn execute(config: &ExperimentConfig, plan: &Plan, hash: &str, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let dir = config.out_dir.clone();
    let records_dir = dir.join(RECORDS);
    std::fs::create_dir_all(&records_dir).map_err(|e| io_err(&records_dir, e))?;
    let templates = load_templates(config)?;
    let imputation = match config.imputation {
        ImputationMode::SampleMean => Imputation::SampleMean,
        ImputationMode::CorpusMean => Imputation::CorpusMean(plan.corpus_mean),
    };
    let ctx = Ctx {
        config,
        plan,
        templates,
        client: build_client(config, &plan.catalog, opts)?,
        samples: plan.samples.iter().map(|s| (s.id.as_str(), s)).collect(),
        imputation,
    };
    let mut budget = Budget(opts.stop_after);
    let mut written = 0;

    let profiles = if config.methods.contains(&Method::Lfm) {
        stage_profiles(&ctx, &records_dir, &mut budget, &mut written)?
    } else {
        BTreeMap::new()
    };
    for method in [Method::Lfm, Method::Direct] {
        if config.methods.contains(&method) && !budget.exhausted() {
            stage_decoders(&ctx, method, &profiles, &records_dir, &mut budget, &mut written)?;
        }
    }
    if config.methods.contains(&Method::Nmf) && !budget.exhausted() {
        stage_nmf(&ctx, &records_dir, &mut budget, &mut written)?;
    }
    if config.methods.contains(&Method::Default) && !budget.exhausted() {
        stage_default(&ctx, &records_dir, &mut budget, &mut written)?;
    }

    let records = load_records(&dir)?;
    let expected = expected_record_count(config, plan);
    let complete = records.len() == expected && profiles_complete(config, plan, &profiles);
    let backend_calls = ctx.client.as_ref().map_or(0, |c| c.calls());
    let mut metrics = Vec::new();
    if complete {
        let scored: Vec<ScoredInstance> = records.iter().map(|r| r.scored.clone()).collect();
        if !scored.is_empty() {
            metrics = aggregate(&scored, GroupBy::ALL)?;
        }
        eval::write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
        eval::write_metrics_json(&dir.join("metrics.json"), &metrics)?;
        write_runtime_csv(&dir.join("runtime.csv"), &log_runtime(&dir)?)?;
    }
    Ok(RunManifest {
        dir,
        config_hash: hash.to_string(),
        n_instances: plan.instances.len(),
        n_records: records.len(),
        new_records: written,
        complete,
        backend_calls,
        metrics,
    })
}

fn expected_record_count(config: &ExperimentConfig, plan: &Plan) -> usize {
    let per_instance: usize = config
        .methods
        .iter()
        .map(|m| match m {
            Method::Lfm => config.profile_word_limits.len(),
            Method::Nmf => config.background_sizes.len(),
            Method::Direct | Method::Default => 1,
        })
        .sum();
    per_instance * plan.instances.len()
}

fn profiles_complete(config: &ExperimentConfig, plan: &Plan, profiles: &BTreeMap<(String, usize), ProfileRecord>) -> bool {
    !config.methods.contains(&Method::Lfm) || profiles.len() == plan.samples.len() * config.profile_word_limits.len()
}

fn stage_profiles(
    ctx: &Ctx<'_>,
    records_dir: &Path,
    budget: &mut Budget,
    written: &mut usize,
) -> Result<BTreeMap<(String, usize), ProfileRecord>, RunError> {
    let path = records_dir.join(PROFILES);
    let mut done: BTreeMap<(String, usize), ProfileRecord> = BTreeMap::new();
    for p in read_jsonl::<ProfileRecord>(&path)? {
        done.insert((p.sample_id.clone(), p.word_limit), p);
    }
    let mut jobs: Vec<(&UserSample, usize)> = Vec::new();
    for s in &ctx.plan.samples {
        for &wl in &ctx.config.profile_word_limits {
            if !done.contains_key(&(s.id.clone(), wl)) {
                jobs.push((s, wl));
            }
        }
    }
    jobs.truncate(budget.allow(jobs.len()));
    let mut out = Appender::open(&path)?;
    for chunk in jobs.chunks(chunk_size(ctx)) {
        let results = parallel_map(chunk, ctx.config.workers, |&(sample, wl)| {
            let base = ProfileRecord {
                sample_id: sample.id.clone(),
                user: sample.user,
                history_size: sample.history_size,
                repeat: sample.repeat,
                word_limit: wl,
                profile: None,
                call: None,
                error: None,
            };
            let prompt = match render_summarize_prompt(&ctx.templates, &sample.history, wl, &ctx.plan.catalog) {
                Ok(p) => p,
                Err(e) => return ProfileRecord { error: Some(e.to_string()), ..base },
            };
            match ctx.generate("summarize", &prompt) {
                Ok(call) => ProfileRecord {
                    profile: Some(ProfileText::new(call.output.trim(), wl, sample.id.clone())),
                    call: Some(call),
                    ..base
                },
                Err(e) => ProfileRecord { error: Some(e.to_string()), ..base },
            }
        });
        for r in results {
            out.push(&r)?;
            done.insert((r.sample_id.clone(), r.word_limit), r);
        }
        out.flush()?;
        budget.spend(chunk.len());
        *written += chunk.len();
    }
    Ok(done)
}

fn chunk_size(ctx: &Ctx<'_>) -> usize {
    ctx.config.workers.max(1) * 16
}

fn existing_keys(path: &Path) -> Result<HashSet<String>, RunError> {
    Ok(read_jsonl::<RunRecord>(path)?.iter().map(RunRecord::record_key).collect())
}

fn stage_decoders(
    ctx: &Ctx<'_>,
    method: Method,
    profiles: &BTreeMap<(String, usize), ProfileRecord>,
    records_dir: &Path,
    budget: &mut Budget,
    written: &mut usize,
) -> Result<(), RunError> {
    let path = records_dir.join(method_file(method));
    let done = existing_keys(&path)?;
    let limits: Vec<Option<usize>> = match method {
        Method::Lfm => ctx.config.profile_word_limits.iter().map(|&w| Some(w)).collect(),
        _ => vec![None],
    };
    let mut jobs: Vec<(&TaskInstance, CellKey)> = Vec::new();
    for &wl in &limits {
        for inst in &ctx.plan.instances {
            let key = CellKey {
                method,
                task: inst.kind(),
                history_size: inst.history_size,
                profile_length: wl,
                background_size: None,
            };
            if !done.contains(&record_key(&key, &inst.id)) {
                jobs.push((inst, key));
            }
        }
    }
    jobs.truncate(budget.allow(jobs.len()));
    let mut out = Appender::open(&path)?;
    for chunk in jobs.chunks(chunk_size(ctx)) {
        let results = parallel_map(chunk, ctx.config.workers, |(inst, key)| decode_one(ctx, inst, key.clone(), profiles));
        for r in results {
            out.push(&r?)?;
        }
        out.flush()?;
        budget.spend(chunk.len());
        *written += chunk.len();
    }
    Ok(())
}

fn decode_one(
    ctx: &Ctx<'_>,
    inst: &TaskInstance,
    key: CellKey,
    profiles: &BTreeMap<(String, usize), ProfileRecord>,
) -> Result<RunRecord, RunError> {
    let history = ctx.history(inst);
    let mut calls = Vec::new();
    let mut error = None;
    let profile = key.profile_length.map(|wl| profiles.get(&(inst.sample_id.clone(), wl)).and_then(|p| p.profile.as_ref()));
    let context = match profile {
        Some(Some(p)) => Some(TaskContext::Profile(p)),
        Some(None) => None,
        None => Some(TaskContext::History(history)),
    };
    let prediction = match context {
        None => {
            error = Some("profile unavailable".to_string());
            Prediction::GenerationFailed
        }
        Some(context) => match decode_with(ctx, inst, context, &mut calls) {
            Ok(p) => p,
            Err(e) => {
                error = Some(e);
                Prediction::GenerationFailed
            }
        },
    };
    let scored = score_prediction(inst, key, prediction, history, ctx.imputation)?;
    Ok(RunRecord { instance_id: inst.id.clone(), user: inst.user, repeat: inst.repeat, calls, error, scored })
}

fn decode_with(ctx: &Ctx<'_>, inst: &TaskInstance, context: TaskContext<'_>, calls: &mut Vec<CallRecord>) -> Result<Prediction, String> {
    let kind = inst.kind();
    let prompt = render_task_prompt(&ctx.templates, kind, context, inst, &ctx.plan.catalog).map_err(|e| e.to_string())?;
    let first = ctx.generate("decode", &prompt).map_err(|e| e.to_string())?;
    let first_output = first.output.clone();
    calls.push(first);
    Ok(match kind {
        TaskKind::Rating => extract_rating(&first_output),
        TaskKind::Choice => extract_choice(&first_output),
        TaskKind::Preference => {
            let Ok(follow) = render_preference_followup(&ctx.templates, &first_output, inst, &ctx.plan.catalog) else {
                return Ok(Prediction::Unreadable);
            };
            let second = ctx.generate("followup", &follow).map_err(|e| e.to_string())?;
            let prediction = extract_preference(&first_output, &second.output);
            calls.push(second);
            prediction
        }
    })
}

fn stage_default(ctx: &Ctx<'_>, records_dir: &Path, budget: &mut Budget, written: &mut usize) -> Result<(), RunError> {
    let path = records_dir.join(method_file(Method::Default));
    let done = existing_keys(&path)?;
    let mut out = Appender::open(&path)?;
    let mut n = 0;
    for inst in &ctx.plan.instances {
        if budget.exhausted() {
            break;
        }
        let scored = eval::default_baseline(inst, ctx.history(inst), ctx.imputation)?;
        if done.contains(&record_key(&scored.key, &inst.id)) {
            continue;
        }
        out.push(&RunRecord { instance_id: inst.id.clone(), user: inst.user, repeat: inst.repeat, calls: vec![], error: None, scored })?;
        budget.spend(1);
        n += 1;
    }
    out.flush()?;
    *written += n;
    Ok(())
}

fn stage_nmf(ctx: &Ctx<'_>, records_dir: &Path, budget: &mut Budget, written: &mut usize) -> Result<(), RunError> {
    let path = records_dir.join(method_file(Method::Nmf));
    let done = existing_keys(&path)?;
    let mut out = Appender::open(&path)?;
    let mut timing = Appender::open(&records_dir.join(NMF_TIMING))?;
    let by_user = ratings_by_user(&ctx.plan.ratings);

    let mut groups: BTreeMap<(usize, usize), Vec<&TaskInstance>> = BTreeMap::new();
    for inst in &ctx.plan.instances {
        groups.entry((inst.history_size, inst.repeat)).or_default().push(inst);
    }
    for (&(c, repeat), instances) in &groups {
        for &bg in &ctx.config.background_sizes {
            if budget.exhausted() {
                break;
            }
            let key_for = |inst: &TaskInstance| CellKey {
                method: Method::Nmf,
                task: inst.kind(),
                history_size: c,
                profile_length: None,
                background_size: Some(bg),
            };
            let mut todo: Vec<&TaskInstance> =
                instances.iter().copied().filter(|i| !done.contains(&record_key(&key_for(i), &i.id))).collect();
            if todo.is_empty() {
                continue;
            }
            todo.truncate(budget.allow(todo.len()));
            let samples: Vec<&UserSample> =
                ctx.plan.samples.iter().filter(|s| s.history_size == c && s.repeat == repeat).collect();
            let background = &ctx.plan.pool.background_users[..bg.min(ctx.plan.pool.background_users.len())];
            if bg > background.len() {
                log::warn!("background size {bg} requested, {} available", background.len());
            }

            let needs_ratings = todo.iter().any(|i| i.kind() != TaskKind::Choice);
            let needs_choice = todo.iter().any(|i| i.kind() == TaskKind::Choice);
            let mut ratings_model = None;
            let mut choice_model = None;
            let mut fit_ms = BTreeMap::new();
            if needs_ratings {
                let start = Instant::now();
                let mut obs: Vec<Observation> = samples
                    .iter()
                    .flat_map(|s| s.history.iter())
                    .chain(background.iter().flat_map(|u| by_user.get(u).into_iter().flatten()))
                    .map(|e| Observation { user: e.user, item: e.movie, value: e.rating.value() })
                    .collect();
                obs.sort_by(|a, b| (a.user, a.item).cmp(&(b.user, b.item)));
                ratings_model = Some(nmf::fit(&obs, &ctx.config.nmf).map_err(|e| e.to_string()));
                fit_ms.insert("ratings", start.elapsed().as_secs_f64() * 1e3);
            }
            if needs_choice {
                let start = Instant::now();
                let mut seen = Vec::new();
                let mut negatives = Vec::new();
                for s in &samples {
                    let rated: HashSet<MovieId> = s.history.iter().chain(&s.held_out).map(|e| e.movie).collect();
                    seen.extend(s.history.iter().map(|e| (e.user, e.movie)));
                    negatives.extend(
                        sample_unseen_pool(s.user, &rated, c, &ctx.plan.catalog, &ctx.config.sampling)
                            .into_iter()
                            .map(|m| (s.user, m)),
                    );
                }
                for u in background {
                    let events = by_user.get(u).map(Vec::as_slice).unwrap_or(&[]);
                    let rated: HashSet<MovieId> = events.iter().map(|e| e.movie).collect();
                    seen.extend(events.iter().map(|e| (e.user, e.movie)));
                    negatives.extend(
                        sample_unseen_pool(*u, &rated, events.len(), &ctx.plan.catalog, &ctx.config.sampling)
                            .into_iter()
                            .map(|m| (*u, m)),
                    );
                }
                choice_model = Some(nmf::fit_choice(&seen, &negatives, &ctx.config.nmf).map_err(|e| e.to_string()));
                fit_ms.insert("choices", start.elapsed().as_secs_f64() * 1e3);
            }

            let mut predict_ms: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for inst in &todo {
                let start = Instant::now();
                let (model, variant) = match inst.kind() {
                    TaskKind::Choice => (choice_model.as_ref(), "choices"),
                    _ => (ratings_model.as_ref(), "ratings"),
                };
                let model = model.expect("model fitted for every pending kind");
                let record = nmf_record(ctx, inst, key_for(inst), model)?;
                let entry = predict_ms.entry(variant).or_default();
                entry.0 += start.elapsed().as_secs_f64() * 1e3;
                entry.1 += 1;
                out.push(&record)?;
            }
            out.flush()?;
            for (variant, ms) in &fit_ms {
                let (p_ms, n) = predict_ms.get(variant).copied().unwrap_or_default();
                timing.push(&NmfTiming {
                    history_size: c,
                    repeat,
                    background_size: bg,
                    variant: variant.to_string(),
                    fit_ms: *ms,
                    predict_ms: p_ms,
                    n_predictions: n,
                })?;
            }
            timing.flush()?;
            budget.spend(todo.len());
            *written += todo.len();
        }
    }
    Ok(())
}

fn nmf_record(
    ctx: &Ctx<'_>,
    inst: &TaskInstance,
    key: CellKey,
    model: &Result<FactorModel, String>,
) -> Result<RunRecord, RunError> {
    let history = ctx.history(inst);
    let record = |scored, error| RunRecord {
        instance_id: inst.id.clone(),
        user: inst.user,
        repeat: inst.repeat,
        calls: vec![],
        error,
        scored,
    };
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            let scored = score_prediction(inst, key, Prediction::GenerationFailed, history, ctx.imputation)?;
            return Ok(record(scored, Some(e.clone())));
        }
    };
    let known = |m: MovieId| model.user_factors(inst.user).is_some() && model.item_factors(m).is_some();
    let scored = match (inst.truth_rating(), inst.pair()) {
        (Some(truth), _) => {
            let movie = inst.target_movies()[0];
            let est = model.predict(inst.user, movie, RATING_CLIP);
            let prediction = if est.imputed { Prediction::Unreadable } else { Prediction::Readable(Answer::Score(est.value)) };
            ScoredInstance {
                instance_id: inst.id.clone(),
                key,
                prediction,
                imputed: est.imputed,
                credit: None,
                error: Some(est.value - truth.value()),
            }
        }
        (None, Some((a, b))) => {
            let clip = if inst.kind() == TaskKind::Choice { CHOICE_CLIP } else { RATING_CLIP };
            let verdict = model.predict_pair(inst.user, a, b, clip);
            let truth = inst.truth_side().expect("pairwise instance has a side");
            let prediction = match verdict {
                PairVerdict::A => Prediction::Readable(Answer::Choice(Side::A)),
                PairVerdict::B => Prediction::Readable(Answer::Choice(Side::B)),
                PairVerdict::Tie => Prediction::Unreadable,
            };
            ScoredInstance {
                instance_id: inst.id.clone(),
                key,
                prediction,
                imputed: !(known(a) && known(b)),
                credit: Some(score_verdict(verdict, truth)),
                error: None,
            }
        }
        (None, None) => unreachable!("instance has neither rating nor pair"),
    };
    Ok(record(scored, None))
}

/// All method records in a run directory, ordered by cell key then
/// instance id.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, RunError> {
    let mut all = Vec::new();
    for m in [Method::Lfm, Method::Direct, Method::Nmf, Method::Default] {
        all.extend(read_jsonl::<RunRecord>(&dir.join(RECORDS).join(method_file(m)))?);
    }
    all.sort_by(|a, b| a.key().cmp(b.key()).then_with(|| a.instance_id.cmp(&b.instance_id)));
    Ok(all)
}

pub fn load_profiles(dir: &Path) -> Result<Vec<ProfileRecord>, RunError> {
    read_jsonl(&dir.join(RECORDS).join(PROFILES))
}

fn load_templates(config: &ExperimentConfig) -> Result<PromptTemplateSet, RunError> {
    match &config.templates_dir {
        Some(d) => PromptTemplateSet::load_dir(d).map_err(|e| RunError::Config(e.to_string())),
        None => Ok(PromptTemplateSet::default()),
    }
}

/// Instance ids the config would produce, in run order.
pub fn planned_instance_ids(config: &ExperimentConfig) -> Result<Vec<String>, RunError> {
    let config = config.resolved();
    Ok(plan(&config)?.instances.into_iter().map(|i| i.id).collect())
}

/// Every prompt the run sends for one instance, unwrapped, as (stage, text).
/// Profiles come from `profiles` when present; otherwise a placeholder is
/// used. The preference follow-up is shown with a placeholder first answer.
pub fn dump_prompts(
    config: &ExperimentConfig,
    instance_id: &str,
    profiles: &[ProfileRecord],
) -> Result<Vec<(String, String)>, RunError> {
    let config = config.resolved();
    let plan = plan(&config)?;
    let templates = load_templates(&config)?;
    let inst = plan
        .instances
        .iter()
        .find(|i| i.id == instance_id)
        .ok_or_else(|| RunError::Config(format!("no instance {instance_id:?} in this configuration")))?;
    let sample = plan
        .samples
        .iter()
        .find(|s| s.id == inst.sample_id)
        .ok_or_else(|| RunError::Config(format!("no sample {:?}", inst.sample_id)))?;
    let prompt_err = |e: crate::prompting::PromptError| RunError::Config(e.to_string());
    let kind = inst.kind();
    let mut out = Vec::new();
    if config.methods.contains(&Method::Lfm) {
        for &limit in &config.profile_word_limits {
            out.push((
                format!("summarize[{limit}]"),
                render_summarize_prompt(&templates, &sample.history, limit, &plan.catalog).map_err(prompt_err)?,
            ));
            let profile = profiles
                .iter()
                .find(|p| p.sample_id == sample.id && p.word_limit == limit)
                .and_then(|p| p.profile.clone())
                .unwrap_or_else(|| ProfileText::new("<profile text>", limit, sample.id.clone()));
            out.push((
                format!("lfm {kind}[{limit}]"),
                render_task_prompt(&templates, kind, TaskContext::Profile(&profile), inst, &plan.catalog)
                    .map_err(prompt_err)?,
            ));
            if kind == TaskKind::Preference {
                out.push((
                    format!("lfm preference followup[{limit}]"),
                    render_preference_followup(&templates, "<first answer>", inst, &plan.catalog).map_err(prompt_err)?,
                ));
            }
        }
    }
    if config.methods.contains(&Method::Direct) {
        out.push((
            format!("direct {kind}"),
            render_task_prompt(&templates, kind, TaskContext::History(&sample.history), inst, &plan.catalog)
                .map_err(prompt_err)?,
        ));
        if kind == TaskKind::Preference {
            out.push((
                "direct preference followup".into(),
                render_preference_followup(&templates, "<first answer>", inst, &plan.catalog).map_err(prompt_err)?,
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub approach: String,
    pub stage: String,
    pub n: usize,
    pub total_ms: f64,
    pub mean_ms: f64,
}

/// Wall-clock totals per (approach, stage). LLM rows sum recorded call
/// latencies; NMF rows sum fit plus predict time per variant.
pub fn log_runtime(dir: &Path) -> Result<Vec<RuntimeRow>, RunError> {
    let mut acc: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
    let mut add = |approach: String, stage: &str, n: usize, ms: f64| {
        let e = acc.entry((approach, stage.to_string())).or_default();
        e.0 += n;
        e.1 += ms;
    };
    for p in load_profiles(dir)? {
        if let Some(call) = &p.call {
            add(method_label(Method::Lfm, Some(p.word_limit), None), "summarize", 1, call.latency_ms as f64);
        }
    }
    for r in load_records(dir)? {
        if r.calls.is_empty() {
            continue;
        }
        let k = r.key();
        let ms: u64 = r.calls.iter().map(|c| c.latency_ms).sum();
        add(method_label(k.method, k.profile_length, k.background_size), k.task.as_str(), 1, ms as f64);
    }
    for t in read_jsonl::<NmfTiming>(&dir.join(RECORDS).join(NMF_TIMING))? {
        let variant = if t.variant == "choices" { "Choices" } else { "Ratings" };
        add(format!("NMF bg{} ({variant})", t.background_size), "fit+predict", 1, t.fit_ms + t.predict_ms);
    }
    Ok(acc
        .into_iter()
        .map(|((approach, stage), (n, total_ms))| RuntimeRow {
            approach,
            stage,
            n,
            total_ms,
            mean_ms: if n > 0 { total_ms / n as f64 } else { 0.0 },
        })
        .collect())
}

pub fn write_runtime_csv(path: &Path, rows: &[RuntimeRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    if rows.is_empty() {
        w.write_record(["approach", "stage", "n", "total_ms", "mean_ms"]).map_err(|e| io_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, write_world, SynthWorldConfig};

    #[test]
    fn partial_last_line_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "[1]\n[2]\n[3, 4").unwrap();
        let rows: Vec<Vec<u32>> = read_jsonl(&path).unwrap();
        assert_eq!(rows, vec![vec![1], vec![2]]);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[1]\n[2]\n");

        std::fs::write(&path, "[1]\n{oops\n[2]\n").unwrap();
        assert!(matches!(read_jsonl::<Vec<u32>>(&path), Err(RunError::ManifestCorrupt(_))));
    }

    fn small_world(dir: &Path) {
        let world = generate_world(&SynthWorldConfig {
            n_users: 6,
            n_background_users: 4,
            background_ratings: 40,
            n_movies: 120,
            ratings_per_user: 40,
            ..Default::default()
        })
        .unwrap();
        write_world(&world, dir).unwrap();
    }

    fn config(dir: &Path, out: &str) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: dir.join(out),
            profile_word_limits: vec![50, 100],
            background_sizes: vec![0, 2],
            workers: 2,
            data: DataConfig { ratings: dir.join("ratings.csv"), movies: dir.join("movies.csv") },
            pool: PoolConfig { exact_count: 40, n_eval: 6, n_background: 4, background_min_ratings: 20, seed: 0 },
            sampling: SamplingConfig { history_sizes: vec![10, 20], items_per_cell: 2, ..Default::default() },
            nmf: NmfConfig { n_factors: 4, ..Default::default() },
            backend: Some(BackendSettings { registry: Some(dir.join("registry.json")), ..Default::default() }),
            ..Default::default()
        }
    }

    #[test]
    fn full_run_counts_and_rerun() {
        let tmp = tempfile::tempdir().unwrap();
        small_world(tmp.path());
        let cfg = config(tmp.path(), "a");
        let m = run_experiment(&cfg).unwrap();
        assert!(m.complete);
        assert_eq!(m.n_instances, 6 * 2 * 3 * 2);
        // LFM x2, Direct, NMF x2, Default
        assert_eq!(m.n_records, m.n_instances * 6);
        let profiles = load_profiles(&m.dir).unwrap();
        assert_eq!(profiles.len(), 6 * 2 * 2);
        for cell in &m.metrics {
            let expected = m.n_instances / 6;
            assert_eq!(cell.n_total, expected, "{cell:?}");
        }
        assert!(matches!(run_experiment(&cfg), Err(RunError::RunDirExists(_))));

        let again = resume(&m.dir).unwrap();
        assert_eq!(again.new_records, 0);
        assert_eq!(again.backend_calls, 0);
        assert_eq!(again.metrics, m.metrics);

        let rows = log_runtime(&m.dir).unwrap();
        assert!(rows.iter().any(|r| r.approach == "LFM 50" && r.stage == "summarize" && r.n == 12));
        assert!(rows.iter().any(|r| r.approach == "NMF bg2 (Choices)"));
        assert!(rows.iter().any(|r| r.approach == "NMF bg0 (Ratings)"));
    }

    #[test]
    fn default_only_needs_no_backend() {
        let tmp = tempfile::tempdir().unwrap();
        small_world(tmp.path());
        let cfg = ExperimentConfig { methods: vec![Method::Default], backend: None, ..config(tmp.path(), "d") };
        let m = run_experiment(&cfg).unwrap();
        assert!(m.complete);
        for cell in m.metrics.iter().filter(|c| c.task != Some(TaskKind::Rating)) {
            assert_eq!(cell.error_rate, Some(0.5));
        }
        assert!(log_runtime(&m.dir).unwrap().is_empty());
    }

    #[test]
    fn llm_without_backend_is_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { backend: None, ..config(tmp.path(), "x") };
        assert!(matches!(run_experiment(&cfg), Err(RunError::Config(_))));
    }

    #[test]
    fn interrupted_run_resumes_to_same_files() {
        let tmp = tempfile::tempdir().unwrap();
        small_world(tmp.path());
        let full = run_experiment(&config(tmp.path(), "full")).unwrap();
        let cfg = config(tmp.path(), "part");
        let half = (full.n_records + 24) / 2;
        let part = run_experiment_with(&cfg, &RunOptions { stop_after: Some(half), generator: None }).unwrap();
        assert!(!part.complete);
        assert_eq!(part.new_records, half);
        // simulate a write cut off mid-line
        let direct = cfg.out_dir.join(RECORDS).join("direct.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&direct).unwrap();
        f.write_all(b"{\"instance_id\":\"rat").unwrap();
        drop(f);
        let done = resume(&cfg.out_dir).unwrap();
        assert!(done.complete);
        assert_eq!(done.metrics, full.metrics);
        for name in ["lfm.jsonl", "direct.jsonl", "nmf.jsonl", "default.jsonl", "profiles.jsonl"] {
            let a = std::fs::read(full.dir.join(RECORDS).join(name)).unwrap();
            let b = std::fs::read(cfg.out_dir.join(RECORDS).join(name)).unwrap();
            if name == "nmf.jsonl" || name == "default.jsonl" {
                assert_eq!(a, b, "{name}");
            } else {
                assert_eq!(a.len(), b.len(), "{name}");
            }
        }
        let a = std::fs::read(full.dir.join("metrics.csv")).unwrap();
        let b = std::fs::read(cfg.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_snapshot_is_manifest_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        small_world(tmp.path());
        let cfg = ExperimentConfig { methods: vec![Method::Default], ..config(tmp.path(), "t") };
        let m = run_experiment(&cfg).unwrap();
        let snap = m.dir.join(SNAPSHOT);
        let text = std::fs::read_to_string(&snap).unwrap();
        std::fs::write(&snap, text.replace("workers = 2", "workers = 3")).unwrap();
        assert!(matches!(resume(&m.dir), Err(RunError::ManifestCorrupt(_))));
    }

    #[test]
    fn config_parses_relative_paths() {
        let text = r#"
out_dir = "out"
methods = ["nmf", "default"]
tasks = ["rating"]

[data]
ratings = "r.csv"
movies = "m.csv"

[sampling]
history_sizes = [10]
"#;
        let c = ExperimentConfig::from_toml_str(text, Path::new("/base")).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("/base/out"));
        assert_eq!(c.data.ratings, PathBuf::from("/base/r.csv"));
        assert_eq!(c.methods, vec![Method::Nmf, Method::Default]);
        assert_eq!(c.sampling.history_sizes, vec![10]);
        assert_eq!(c.sampling.items_per_cell, 3);
        c.validate().unwrap();
        let round = ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(round, c);
    }

    struct Down;
    impl Generator for Down {
        fn backend_id(&self) -> String {
            "down".into()
        }
        fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
            Err(BackendError::BackendUnavailable("down".into()))
        }
    }

    #[test]
    fn generation_failures_are_recorded_not_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        small_world(tmp.path());
        let mut cfg = config(tmp.path(), "f");
        cfg.methods = vec![Method::Lfm, Method::Direct];
        cfg.backend.as_mut().unwrap().max_retries = 0;
        let m = run_experiment_with(&cfg, &RunOptions { stop_after: None, generator: Some(Arc::new(Down)) }).unwrap();
        assert!(m.complete);
        for cell in &m.metrics {
            assert_eq!(cell.n_generation_failed, cell.n_total);
            assert_eq!(cell.reliability, None);
        }
        let records = load_records(&m.dir).unwrap();
        assert!(records.iter().all(|r| r.scored.prediction == Prediction::GenerationFailed));
    }
}
