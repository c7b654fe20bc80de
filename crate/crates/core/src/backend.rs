//! Text generation: a chat-completions HTTP backend, a synthetic-persona
//! mock, and an on-disk response cache keyed by prompt hash.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{MovieCatalog, MovieId, UserId};
use crate::extract::extract_choice;
use crate::prompting::ChatWrapper;
use crate::rng;
use crate::sampler::Side;
use crate::synth::PersonaRegistry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("http status {status}")]
    HttpError { status: u16 },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("corrupt cache entry {0}")]
    CacheCorrupt(PathBuf),
    #[error("cache i/o: {0}")]
    Io(String),
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub max_new_tokens: u32,
    pub model_name: String,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.6,
            top_p: 0.9,
            top_k: 50,
            repetition_penalty: 1.2,
            max_new_tokens: 512,
            model_name: "mock".into(),
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidParams(m.to_string()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if !(self.repetition_penalty >= 1.0) {
            return bad("repetition_penalty must be >= 1");
        }
        if self.model_name.is_empty() {
            return bad("model_name is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub output_text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Unix milliseconds.
    pub created_at: u64,
}

/// SHA-256 over the canonical JSON of (params, wrapper, prompt). The model
/// name is part of the params.
pub fn prompt_hash(params: &GenerationParams, wrapper: &ChatWrapper, prompt: &str) -> String {
    let canonical = serde_json::json!({
        "params": params,
        "wrapper": { "prefix": wrapper.prefix, "suffix": wrapper.suffix },
        "prompt": prompt,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// One JSON file per record, named by prompt hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<ResponseCache, BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| BackendError::Io(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn lookup(&self, hash: &str) -> Result<Option<CompletionRecord>, BackendError> {
        let path = self.path(hash);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Io(format!("{}: {e}", path.display()))),
        };
        let record: CompletionRecord =
            serde_json::from_str(&text).map_err(|_| BackendError::CacheCorrupt(path.clone()))?;
        if record.prompt_hash != hash {
            return Err(BackendError::CacheCorrupt(path));
        }
        Ok(Some(record))
    }

    /// Stores `record` unless an entry already exists; returns whichever
    /// record ends up stored.
    pub fn put(&self, record: &CompletionRecord) -> Result<CompletionRecord, BackendError> {
        let io = |e: std::io::Error| BackendError::Io(e.to_string());
        let path = self.path(&record.prompt_hash);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        serde_json::to_writer_pretty(&mut tmp, record).map_err(|e| BackendError::Io(e.to_string()))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(record.clone()),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => {
                self.lookup(&record.prompt_hash)?.ok_or(BackendError::CacheCorrupt(path))
            }
            Err(e) => Err(io(e.error)),
        }
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|it| it.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that turns a fully wrapped prompt into text.
pub trait Generator: Send + Sync {
    fn backend_id(&self) -> String;
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub system_prompt: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            api_key_env: None,
            timeout_ms: 120_000,
            system_prompt: String::new(),
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<HttpBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::BackendUnavailable(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(HttpBackend { config, client, api_key })
    }

    pub fn request_body(&self, prompt: &str, params: &GenerationParams) -> serde_json::Value {
        let mut messages = Vec::new();
        if !self.config.system_prompt.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": self.config.system_prompt}));
        }
        messages.push(serde_json::json!({"role": "user", "content": prompt}));
        let mut body = serde_json::json!({
            "model": params.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "top_k": params.top_k,
            "repetition_penalty": params.repetition_penalty,
            "max_tokens": params.max_new_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = seed.into();
        }
        body
    }
}

impl Generator for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let body = self.request_body(prompt, params).to_string();
        log::debug!("request {}: {body}", self.config.endpoint);
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { after_ms: self.config.timeout_ms }
            } else {
                BackendError::BackendUnavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { after_ms: self.config.timeout_ms }
            } else {
                BackendError::BadResponse(e.to_string())
            }
        })?;
        log::debug!("response {status}: {text}");
        if !status.is_success() {
            return Err(BackendError::HttpError { status: status.as_u16() });
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))
    }
}

pub const REFUSAL: &str = "I'm sorry, but I cannot help with that request.";

const FOLLOWUP_MARKER: &str = "Which movie does the response say the user prefers?";
const SUMMARIZE_MARKER: &str = "summarize the reasons why I like or dislike";
const RATING_MARKER: &str = "What score out of 5 would you give";
const PREFERENCE_MARKER: &str = "guess which movie does the user prefer";
const CHOICE_MARKER: &str = "more likely to have also consumed and reviewed";

static HISTORY_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"I gave (.+?) a rating of (\d+(?:\.\d+)?) out of 5\.").expect("valid regex"));
static RATING_TARGET: Lazy<Regex> = Lazy::new(|| Regex::new(r"What score out of 5 would you give (.+)\?").expect("valid regex"));
static PAIR: Lazy<Regex> = Lazy::new(|| Regex::new(r"A: (.+?) or B: (.+?)(?:\. Answer with|, a user prefers)").expect("valid regex"));
static QUOTED: Lazy<Regex> = Lazy::new(|| Regex::new(r#"(?s)Response: "(.*)"\s*Which movie"#).expect("valid regex"));
static LIKE_TOP: Lazy<Regex> = Lazy::new(|| Regex::new(r"especially enjoy (genre_\d+)").expect("valid regex"));
static LIKE_SECOND: Lazy<Regex> = Lazy::new(|| Regex::new(r"also like (genre_\d+)").expect("valid regex"));
static DISLIKE: Lazy<Regex> = Lazy::new(|| Regex::new(r"dislike (genre_\d+)").expect("valid regex"));

/// Which template a prompt came from, judged by marker phrases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Followup,
    Summarize,
    Rating,
    Preference,
    Choice,
    Unknown,
}

pub fn classify_prompt(prompt: &str) -> PromptKind {
    if prompt.contains(FOLLOWUP_MARKER) {
        PromptKind::Followup
    } else if prompt.contains(SUMMARIZE_MARKER) {
        PromptKind::Summarize
    } else if prompt.contains(RATING_MARKER) {
        PromptKind::Rating
    } else if prompt.contains(PREFERENCE_MARKER) {
        PromptKind::Preference
    } else if prompt.contains(CHOICE_MARKER) {
        PromptKind::Choice
    } else {
        PromptKind::Unknown
    }
}

/// Decoded weights the mock decoder assigns to profile slots.
const DECODED_TOP: f64 = 0.9;
const DECODED_SECOND: f64 = 0.8;
const DECODED_DISLIKE: f64 = -0.85;

/// What the mock knows about the user behind a prompt.
enum Belief {
    Persona(UserId),
    Decoded(Vec<f64>),
}

/// Deterministic stand-in for both encoder and decoder models. It answers
/// from the persona oracle: raw histories are matched to the persona that
/// fits them best, and profiles are decoded back into approximate genre
/// weights.
pub struct MockModel {
    registry: Arc<PersonaRegistry>,
    catalog: Arc<MovieCatalog>,
    titles: HashMap<String, MovieId>,
}

impl MockModel {
    pub fn new(registry: Arc<PersonaRegistry>, catalog: Arc<MovieCatalog>) -> MockModel {
        let titles = catalog.ids().map(|id| (catalog.get(id).expect("id from catalog").display.clone(), id)).collect();
        MockModel { registry, catalog, titles }
    }

    fn movie(&self, title: &str) -> Option<MovieId> {
        self.titles.get(title.trim()).copied()
    }

    fn title(&self, id: MovieId) -> &str {
        self.catalog.get(id).map(|m| m.display.as_str()).unwrap_or("")
    }

    /// Best-fitting persona for the stated history: fewest unseen movies,
    /// then smallest squared rating error, then lowest id.
    fn identify(&self, prompt: &str) -> Option<UserId> {
        let events: Vec<(MovieId, f64)> = HISTORY_LINE
            .captures_iter(prompt)
            .filter_map(|c| Some((self.movie(&c[1])?, c[2].parse().ok()?)))
            .collect();
        if events.is_empty() {
            return None;
        }
        let mut best: Option<((usize, f64), UserId)> = None;
        for (&user, persona) in &self.registry.personas {
            let mut unseen = 0;
            let mut sse = 0.0;
            for &(movie, stated) in &events {
                unseen += usize::from(!persona.seen.contains(&movie));
                let truth = self.registry.utility_with(&persona.weights, persona.bias, movie).unwrap_or(0.0);
                let d = self.registry.rating_from_utility(truth).value() - stated;
                sse += d * d;
            }
            let score = (unseen, sse);
            if best.as_ref().is_none_or(|(b, _)| score.0 < b.0 || (score.0 == b.0 && score.1 < b.1)) {
                best = Some((score, user));
            }
        }
        best.map(|(_, u)| u)
    }

    fn decode_profile(&self, prompt: &str) -> Option<Vec<f64>> {
        let mut weights = vec![0.0; self.registry.genres.len()];
        let mut found = false;
        for (re, w) in [(&*LIKE_TOP, DECODED_TOP), (&*LIKE_SECOND, DECODED_SECOND), (&*DISLIKE, DECODED_DISLIKE)] {
            if let Some(c) = re.captures(prompt) {
                if let Some(g) = self.registry.genre_index(&c[1]) {
                    weights[g] = w;
                    found = true;
                }
            }
        }
        found.then_some(weights)
    }

    fn belief(&self, prompt: &str) -> Option<Belief> {
        if HISTORY_LINE.is_match(prompt) {
            self.identify(prompt).map(Belief::Persona)
        } else {
            self.decode_profile(prompt).map(Belief::Decoded)
        }
    }

    fn utility(&self, belief: &Belief, movie: MovieId) -> Option<f64> {
        match belief {
            Belief::Persona(u) => self.registry.utility(*u, movie),
            Belief::Decoded(w) => self.registry.utility_with(w, 0.0, movie),
        }
    }

    fn summarize(&self, user: UserId) -> String {
        let weights = &self.registry.personas[&user].weights;
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        let top = &self.registry.genres[order[0]];
        let second = &self.registry.genres[order[1.min(order.len() - 1)]];
        let bottom = &self.registry.genres[order[order.len() - 1]];
        format!(
            "You especially enjoy {top} movies and also like {second} movies. You tend to dislike {bottom} movies."
        )
    }

    fn pick(&self, prompt: &str, ua: f64, ub: f64) -> Side {
        if ua > ub {
            Side::A
        } else if ub > ua {
            Side::B
        } else if rng::unit_hash(rng::tag("mock-tie"), prompt.as_bytes()) < 0.5 {
            Side::A
        } else {
            Side::B
        }
    }

    fn pair(&self, prompt: &str) -> Option<(MovieId, MovieId)> {
        let c = PAIR.captures(prompt)?;
        Some((self.movie(&c[1])?, self.movie(&c[2])?))
    }

    pub fn respond(&self, prompt: &str) -> String {
        self.try_respond(prompt).unwrap_or_else(|| REFUSAL.to_string())
    }

    fn try_respond(&self, prompt: &str) -> Option<String> {
        match classify_prompt(prompt) {
            PromptKind::Followup => {
                let quoted = QUOTED.captures(prompt)?;
                Some(match extract_choice(&quoted[1]).side() {
                    Some(side) => side.as_str().to_string(),
                    None => "Neither".to_string(),
                })
            }
            PromptKind::Summarize => Some(self.summarize(self.identify(prompt)?)),
            PromptKind::Rating => {
                let target = self.movie(&RATING_TARGET.captures(prompt)?[1])?;
                let belief = self.belief(prompt)?;
                let rating = self.registry.rating_from_utility(self.utility(&belief, target)?);
                Some(format!("I would give it a rating of {rating} out of 5."))
            }
            PromptKind::Preference => {
                let (a, b) = self.pair(prompt)?;
                let belief = self.belief(prompt)?;
                let side = self.pick(prompt, self.utility(&belief, a)?, self.utility(&belief, b)?);
                let title = self.title(if side == Side::A { a } else { b });
                Some(format!("The user would likely prefer {}: {title}.", side.as_str()))
            }
            PromptKind::Choice => {
                let (a, b) = self.pair(prompt)?;
                let belief = self.belief(prompt)?;
                let side = match &belief {
                    Belief::Persona(u) => match (self.registry.has_seen(*u, a), self.registry.has_seen(*u, b)) {
                        (true, false) => Side::A,
                        (false, true) => Side::B,
                        _ => self.pick(prompt, self.utility(&belief, a)?, self.utility(&belief, b)?),
                    },
                    Belief::Decoded(_) => self.pick(prompt, self.utility(&belief, a)?, self.utility(&belief, b)?),
                };
                Some(side.as_str().to_string())
            }
            PromptKind::Unknown => None,
        }
    }
}

/// Pure function of (prompt, registry, catalog).
pub fn mock_respond(prompt: &str, registry: &PersonaRegistry, catalog: &MovieCatalog) -> String {
    MockModel::new(Arc::new(registry.clone()), Arc::new(catalog.clone())).respond(prompt)
}

/// Mock generator. With `refusal_rate > 0`, a hash-selected fraction of
/// first-call task prompts (rating, preference, choice) is answered as if
/// the template were unrecognized.
pub struct MockBackend {
    model: MockModel,
    refusal_rate: f64,
}

impl MockBackend {
    pub fn new(registry: Arc<PersonaRegistry>, catalog: Arc<MovieCatalog>, refusal_rate: f64) -> MockBackend {
        MockBackend { model: MockModel::new(registry, catalog), refusal_rate }
    }

    fn refuses(&self, prompt: &str) -> bool {
        self.refusal_rate > 0.0
            && matches!(classify_prompt(prompt), PromptKind::Rating | PromptKind::Preference | PromptKind::Choice)
            && rng::unit_hash(rng::tag("mock-refusal"), prompt.as_bytes()) < self.refusal_rate
    }
}

impl Generator for MockBackend {
    fn backend_id(&self) -> String {
        if self.refusal_rate > 0.0 {
            format!("mock+refusal{}", self.refusal_rate)
        } else {
            "mock".into()
        }
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        if self.refuses(prompt) {
            return Ok(REFUSAL.to_string());
        }
        Ok(self.model.respond(prompt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Attempts after the first.
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_backoff_ms: 500 }
    }
}

struct Limiter {
    max: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Limiter {
        Limiter { max: max.max(1), active: Mutex::new(0), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter lock");
        while *active >= self.max {
            active = self.cv.wait(active).expect("limiter lock");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("limiter lock") -= 1;
        self.0.cv.notify_one();
    }
}

/// Cache-first generation with retries and a cap on in-flight calls.
pub struct BackendClient {
    generator: Arc<dyn Generator>,
    cache: Option<ResponseCache>,
    wrapper: ChatWrapper,
    retry: RetryPolicy,
    limiter: Limiter,
    calls: AtomicU64,
    failures: AtomicU64,
}

impl BackendClient {
    pub fn new(
        generator: Arc<dyn Generator>,
        cache: Option<ResponseCache>,
        wrapper: ChatWrapper,
        retry: RetryPolicy,
        in_flight: usize,
    ) -> BackendClient {
        BackendClient {
            generator,
            cache,
            wrapper,
            retry,
            limiter: Limiter::new(in_flight),
            calls: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }

    /// Backend invocations so far, cache hits excluded.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn failed_attempts(&self) -> u64 {
        self.failures.load(Ordering::SeqCst)
    }

    pub fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<CompletionRecord, BackendError> {
        let hash = prompt_hash(params, &self.wrapper, prompt);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lookup(&hash)? {
                return Ok(hit);
            }
        }
        let wrapped = self.wrapper.wrap(prompt);
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.calls.fetch_add(1, Ordering::SeqCst);
                let start = Instant::now();
                self.generator.complete(&wrapped, params).map(|text| (text, start.elapsed()))
            };
            match result {
                Ok((output_text, elapsed)) => {
                    let record = CompletionRecord {
                        prompt_hash: hash,
                        output_text,
                        latency_ms: elapsed.as_millis() as u64,
                        backend_id: self.generator.backend_id(),
                        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
                    };
                    return match &self.cache {
                        Some(cache) => cache.put(&record),
                        None => Ok(record),
                    };
                }
                Err(e) => {
                    self.failures.fetch_add(1, Ordering::SeqCst);
                    if attempt >= self.retry.max_retries {
                        log::warn!("generation failed after {} attempts: {e}", attempt + 1);
                        return Err(e);
                    }
                    let wait = self.retry.base_backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::info!("attempt {} failed ({e}); retrying in {wait} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
            }
        }
    }
}
