//! Image-prompt generation through an OpenAI-compatible chat-completion API.
//!
//! Every language prompt is sent once (one image prompt per query), with
//! per-kind sampling parameters. Completions are cached on disk under a
//! digest of the full request, so a warm rerun makes no network calls and
//! reproduces the corpus exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;
use crate::promptgen::{LanguagePrompt, PromptKind};

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-0125";
pub const DEFAULT_API_KEY_VAR: &str = "OPENAI_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("query for `{prompt_id}` failed after {attempts} attempts: {reason}")]
    QueryFailed {
        prompt_id: String,
        attempts: u32,
        reason: String,
    },
    #[error("empty completion for `{prompt_id}`")]
    EmptyCompletion { prompt_id: String },
    #[error("cache: {0}")]
    Cache(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl LlmError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Config(_) => "ConfigError",
            Self::QueryFailed { .. } => "QueryFailed",
            Self::EmptyCompletion { .. } => "EmptyCompletion",
            Self::Cache(_) => "CacheError",
            Self::Corpus(_) => "CorpusError",
            Self::Io { .. } => "Io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LlmError + '_ {
    move |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sampling parameters for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryParams {
    pub max_tokens: Option<u32>,
    pub stop: Option<String>,
    pub temperature: f64,
}

impl QueryParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        if let Some(stop) = &self.stop {
            if stop.is_empty() || stop.chars().any(char::is_whitespace) && stop.trim() != "" {
                return Err(LlmError::Config(format!("stop `{stop}` must be a single token")));
            }
        }
        Ok(())
    }
}

/// Model plus default and per-kind sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmQueryConfig {
    pub model: String,
    pub default: QueryParams,
    #[serde(default)]
    pub overrides: BTreeMap<PromptKind, QueryParams>,
}

impl LlmQueryConfig {
    /// Comparative prompts: 150 tokens, stop at '.', temperature 1.0.
    /// Path-based prompts: 150 tokens, no stop, temperature 1.0.
    pub fn hierarchy_aware(model: &str) -> Self {
        let comparative = QueryParams {
            max_tokens: Some(150),
            stop: Some(".".into()),
            temperature: 1.0,
        };
        let mut overrides = BTreeMap::new();
        overrides.insert(PromptKind::LeafPeer, comparative.clone());
        overrides.insert(PromptKind::AncestorPeer, comparative);
        overrides.insert(
            PromptKind::PathBased,
            QueryParams {
                max_tokens: Some(150),
                stop: None,
                temperature: 1.0,
            },
        );
        Self {
            model: model.to_string(),
            default: QueryParams {
                max_tokens: Some(150),
                stop: None,
                temperature: 1.0,
            },
            overrides,
        }
    }

    /// Single parameter set for every prompt kind.
    pub fn uniform(model: &str, params: QueryParams) -> Self {
        Self {
            model: model.to_string(),
            default: params,
            overrides: BTreeMap::new(),
        }
    }

    /// Configuration used by dataset-specific descriptive prompting.
    pub fn cupl(model: &str) -> Self {
        Self::uniform(
            model,
            QueryParams {
                max_tokens: Some(50),
                stop: Some(".".into()),
                temperature: 0.99,
            },
        )
    }

    /// Configuration used by bullet-point descriptor prompting.
    pub fn vcd(model: &str) -> Self {
        Self::uniform(
            model,
            QueryParams {
                max_tokens: Some(100),
                stop: None,
                temperature: 0.0,
            },
        )
    }

    /// Configuration used by group-comparison prompting.
    pub fn hie(model: &str) -> Self {
        Self::uniform(
            model,
            QueryParams {
                max_tokens: None,
                stop: None,
                temperature: 1.0,
            },
        )
    }

    pub fn params_for(&self, kind: PromptKind) -> &QueryParams {
        self.overrides.get(&kind).unwrap_or(&self.default)
    }

    /// Replaces the given fields in the default and every override.
    pub fn override_all(&mut self, max_tokens: Option<u32>, stop: Option<Option<String>>, temperature: Option<f64>) {
        for p in std::iter::once(&mut self.default).chain(self.overrides.values_mut()) {
            if let Some(m) = max_tokens {
                p.max_tokens = Some(m);
            }
            if let Some(s) = &stop {
                p.stop = s.clone();
            }
            if let Some(t) = temperature {
                p.temperature = t;
            }
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model.trim().is_empty() {
            return Err(LlmError::Config("model must be set".into()));
        }
        self.default.validate()?;
        self.overrides.values().try_for_each(QueryParams::validate)
    }
}

fn sha256_hex(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Digest of everything that determines a completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(model: &str, prompt: &str, params: &QueryParams) -> Self {
        Self(sha256_hex(&serde_json::json!([
            model,
            prompt,
            params.max_tokens,
            params.stop,
            params.temperature
        ])))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Short digest of the request parameters, recorded with each image prompt.
pub fn config_fingerprint(model: &str, params: &QueryParams) -> String {
    sha256_hex(&serde_json::json!([
        model,
        params.max_tokens,
        params.stop,
        params.temperature
    ]))[..16]
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedCompletion {
    pub text: String,
    pub model: String,
    /// Seconds since the Unix epoch when the completion was fetched.
    pub timestamp: u64,
}

pub trait CacheStore: Send + Sync {
    fn get(&self, key: &CacheKey) -> Option<CachedCompletion>;
    fn put(&self, key: &CacheKey, value: &CachedCompletion) -> Result<(), LlmError>;
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: CacheKey,
    #[serde(flatten)]
    value: CachedCompletion,
}

/// Content-addressed files: `<dir>/<first two hex digits>/<key>.json`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }
}

impl CacheStore for DiskCache {
    fn get(&self, key: &CacheKey) -> Option<CachedCompletion> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                warn!("cache entry {} unreadable, treating as miss: {e}", path.display());
                return None;
            }
        };
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == *key => Some(entry.value),
            Ok(_) => {
                warn!("cache entry {} has a mismatched key, treating as miss", path.display());
                None
            }
            Err(e) => {
                warn!("cache entry {} is corrupt, treating as miss: {e}", path.display());
                None
            }
        }
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// into place.
    fn put(&self, key: &CacheKey, value: &CachedCompletion) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let entry = CacheEntry {
            key: key.clone(),
            value: value.clone(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err(parent))?;
        serde_json::to_writer(&mut tmp, &entry).map_err(|e| LlmError::Cache(e.to_string()))?;
        tmp.flush().map_err(io_err(&path))?;
        tmp.persist(&path)
            .map_err(|e| LlmError::Cache(format!("{}: {}", path.display(), e.error)))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub params: QueryParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatCompletion {
    pub content: String,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status { code: u16, body: String },
    Network(String),
    Decode(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Status { code, .. } => *code == 429 || *code >= 500,
            Self::Network(_) => true,
            Self::Decode(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            Self::Network(m) => write!(f, "network: {m}"),
            Self::Decode(m) => write!(f, "bad response: {m}"),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, TransportError>;
}

/// `POST {base_url}/chat/completions` with a bearer credential.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, api_key: &str, timeout: Duration) -> Result<Self, LlmError> {
        if api_key.trim().is_empty() {
            return Err(LlmError::Config("API credential is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.to_string(),
        })
    }

    /// Reads the credential from `var`; fails before any request is made.
    pub fn from_env(base_url: &str, var: &str, timeout: Duration) -> Result<Self, LlmError> {
        let key = std::env::var(var)
            .map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?;
        Self::new(base_url, &key, timeout)
    }
}

#[derive(Deserialize)]
struct ApiResponse {
    choices: Vec<ApiChoice>,
}

#[derive(Deserialize)]
struct ApiChoice {
    message: ApiMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ApiMessage {
    content: Option<String>,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, TransportError> {
        let mut body = serde_json::json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.params.temperature,
        });
        if let Some(m) = request.params.max_tokens {
            body["max_tokens"] = m.into();
        }
        if let Some(s) = &request.params.stop {
            body["stop"] = s.as_str().into();
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportError::Status { code, body: text });
        }
        let parsed: ApiResponse = serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Decode("no choices".into()))?;
        Ok(ChatCompletion {
            content: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts for transport errors, 429 and 5xx.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Extra attempts after an empty completion.
    pub empty_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            empty_retries: 1,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with up to 50% random jitter.
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << attempt.min(16)).min(self.max_delay);
        let jitter = rand::rng().random_range(0.0..0.5);
        exp.mul_f64(1.0 + jitter)
    }
}

/// Trims the completion and restores a period removed by a '.' stop.
pub fn finalize_completion(c: &ChatCompletion, stop: Option<&str>) -> String {
    let mut text = c.content.trim().to_string();
    let stopped = c.finish_reason.as_deref() == Some("stop");
    if stop == Some(".") && stopped && !text.is_empty() && !text.ends_with(['.', '!', '?']) {
        text.push('.');
    }
    text
}

/// Splits a bulleted response into separate image prompts.
///
/// Lines starting with `-`, `•` or `N.` open a new item; other non-empty
/// lines continue the previous item. Text before the first bullet is
/// dropped. A response without bullets is returned whole.
pub fn split_bullets(response: &str) -> Vec<String> {
    fn strip_marker(line: &str) -> Option<&str> {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix('-').or_else(|| t.strip_prefix('•')) {
            return Some(rest);
        }
        let digits = t.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = t[digits..].strip_prefix('.') {
                if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                    return Some(rest);
                }
            }
        }
        None
    }

    let mut items: Vec<String> = Vec::new();
    let mut any_bullet = false;
    for line in response.lines() {
        if let Some(rest) = strip_marker(line) {
            any_bullet = true;
            items.push(rest.trim().to_string());
        } else if any_bullet && !line.trim().is_empty() {
            let last = items.last_mut().expect("a bullet precedes continuations");
            if !last.is_empty() {
                last.push(' ');
            }
            last.push_str(line.trim());
        }
    }
    if !any_bullet {
        let whole = response.trim();
        return if whole.is_empty() { Vec::new() } else { vec![whole.to_string()] };
    }
    items.retain(|s| !s.is_empty());
    items
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePrompt {
    pub source_prompt_id: String,
    pub text: String,
    pub model: String,
    pub config_fingerprint: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusRecord {
    source_prompt_id: String,
    text: String,
    class: String,
    model: String,
    config_fingerprint: String,
    timestamp: u64,
}

/// Image prompts per class, classes in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImagePromptCorpus {
    classes: Vec<(String, Vec<ImagePrompt>)>,
}

impl ImagePromptCorpus {
    pub fn push(&mut self, class: &str, prompt: ImagePrompt) {
        match self.classes.iter_mut().find(|(c, _)| c == class) {
            Some((_, v)) => v.push(prompt),
            None => self.classes.push((class.to_string(), vec![prompt])),
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(c, _)| c.as_str())
    }

    pub fn entries(&self, class: &str) -> &[ImagePrompt] {
        self.classes
            .iter()
            .find(|(c, _)| c == class)
            .map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ImagePrompt)> {
        self.classes
            .iter()
            .flat_map(|(c, v)| v.iter().map(move |p| (c.as_str(), p)))
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every leaf must have at least one non-empty image prompt before the
    /// corpus can be used for classification.
    pub fn check_covers(&self, h: &LabelHierarchy) -> Result<(), LlmError> {
        for name in h.leaf_names() {
            let entries = self
                .classes
                .iter()
                .find(|(c, _)| c.eq_ignore_ascii_case(name))
                .map_or(&[][..], |(_, v)| v.as_slice());
            if !entries.iter().any(|p| !p.text.trim().is_empty()) {
                return Err(LlmError::Corpus(format!("class `{name}` has no image prompts")));
            }
        }
        Ok(())
    }

    fn file_name(index: usize, class: &str) -> String {
        let slug: String = class
            .chars()
            .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("{index:04}_{slug}.jsonl")
    }

    /// Class file contents keyed by file name.
    pub fn to_files(&self) -> Vec<(String, String)> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, (class, entries))| {
                let mut body = String::new();
                for p in entries {
                    let rec = CorpusRecord {
                        source_prompt_id: p.source_prompt_id.clone(),
                        text: p.text.clone(),
                        class: class.clone(),
                        model: p.model.clone(),
                        config_fingerprint: p.config_fingerprint.clone(),
                        timestamp: p.timestamp,
                    };
                    body.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                    body.push('\n');
                }
                (Self::file_name(i, class), body)
            })
            .collect()
    }

    /// One line-delimited JSON file per class.
    pub fn write_dir(&self, dir: &Path) -> Result<(), LlmError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in self.to_files() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, LlmError> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        let mut corpus = Self::default();
        for path in files {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let rec: CorpusRecord = serde_json::from_str(line)
                    .map_err(|e| LlmError::Corpus(format!("{}:{}: {e}", path.display(), i + 1)))?;
                corpus.push(
                    &rec.class,
                    ImagePrompt {
                        source_prompt_id: rec.source_prompt_id,
                        text: rec.text,
                        model: rec.model,
                        config_fingerprint: rec.config_fingerprint,
                        timestamp: rec.timestamp,
                    },
                );
            }
        }
        Ok(corpus)
    }
}

/// Counters from one generation run.
#[derive(Debug, Default)]
pub struct GenerationStats {
    pub requests: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub retries: AtomicUsize,
}

/// Fans language prompts out to the chat backend with caching and retries.
pub struct ImagePromptGenerator<'a> {
    backend: &'a dyn ChatBackend,
    cache: &'a dyn CacheStore,
    config: LlmQueryConfig,
    retry: RetryPolicy,
    parallelism: usize,
    split_bullets: bool,
    stats: GenerationStats,
}

impl<'a> ImagePromptGenerator<'a> {
    pub fn new(
        backend: &'a dyn ChatBackend,
        cache: &'a dyn CacheStore,
        config: LlmQueryConfig,
    ) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            backend,
            cache,
            config,
            retry: RetryPolicy::default(),
            parallelism: 4,
            split_bullets: false,
            stats: GenerationStats::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Split each response into bullet items, one image prompt each.
    pub fn with_bullet_splitting(mut self, on: bool) -> Self {
        self.split_bullets = on;
        self
    }

    pub fn stats(&self) -> &GenerationStats {
        &self.stats
    }

    fn query(&self, prompt: &LanguagePrompt) -> Result<CachedCompletion, LlmError> {
        let params = self.config.params_for(prompt.kind);
        let key = CacheKey::new(&self.config.model, &prompt.text, params);
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let request = ChatRequest {
            model: self.config.model.clone(),
            prompt: prompt.text.clone(),
            params: params.clone(),
        };

        let mut attempts = 0u32;
        let mut transport_failures = 0u32;
        let mut empties = 0u32;
        loop {
            attempts += 1;
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(&request) {
                Ok(c) => {
                    let text = finalize_completion(&c, params.stop.as_deref());
                    if text.is_empty() {
                        if empties < self.retry.empty_retries {
                            empties += 1;
                            self.stats.retries.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                        return Err(LlmError::EmptyCompletion { prompt_id: prompt.id() });
                    }
                    let value = CachedCompletion {
                        text,
                        model: self.config.model.clone(),
                        timestamp: SystemTime::now()
                            .duration_since(UNIX_EPOCH)
                            .map_or(0, |d| d.as_secs()),
                    };
                    self.cache.put(&key, &value)?;
                    return Ok(value);
                }
                Err(e) => {
                    transport_failures += 1;
                    if !e.is_retryable() || transport_failures >= self.retry.max_attempts {
                        return Err(LlmError::QueryFailed {
                            prompt_id: prompt.id(),
                            attempts,
                            reason: e.to_string(),
                        });
                    }
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    warn!("{}: {e}; retrying", prompt.id());
                    std::thread::sleep(self.retry.delay(transport_failures - 1));
                }
            }
        }
    }

    /// One image prompt per language prompt (or one per bullet when
    /// splitting), in input order.
    pub fn generate(&self, prompts: &[LanguagePrompt]) -> Result<ImagePromptCorpus, LlmError> {
        if prompts.is_empty() {
            return Err(LlmError::Config("no language prompts to send".into()));
        }
        let results: Mutex<Vec<Option<Result<CachedCompletion, LlmError>>>> =
            Mutex::new((0..prompts.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let workers = self.parallelism.min(prompts.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.query(&prompts[i]);
                    if r.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });

        let mut corpus = ImagePromptCorpus::default();
        for (prompt, r) in prompts.iter().zip(results.into_inner().unwrap()) {
            // prompts skipped after a failure come after the failing one
            let completion = match r {
                Some(r) => r?,
                None => continue,
            };
            let params = self.config.params_for(prompt.kind);
            let fingerprint = config_fingerprint(&self.config.model, params);
            let texts = if self.split_bullets {
                split_bullets(&completion.text)
            } else {
                vec![completion.text.clone()]
            };
            for text in texts {
                corpus.push(
                    &prompt.query_class,
                    ImagePrompt {
                        source_prompt_id: prompt.id(),
                        text,
                        model: completion.model.clone(),
                        config_fingerprint: fingerprint.clone(),
                        timestamp: completion.timestamp,
                    },
                );
            }
        }
        Ok(corpus)
    }
}
