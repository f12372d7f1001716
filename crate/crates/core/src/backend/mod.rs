//! Completion backends: an OpenAI-compatible HTTP endpoint and a scripted
//! mock, behind one interface with disk caching, retry and bounded parallelism.

mod cache;
mod http;
mod mock;

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{json_digest, sha256_hex};
use crate::prompting::PromptBundle;

pub use cache::{CacheKey, DiskCache};
pub use mock::{MockEntry, MockMatch, MockScript, ScriptedLogprob};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("mock script: {0}")]
    Script(String),
    #[error("backend cannot score continuations: {0}")]
    Capability(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("continuation is empty; nothing to score")]
    EmptyContinuation,
    #[error("cache error at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = self
            .backoff_factor
            .max(1.0)
            .powi(retry.saturating_sub(1) as i32);
        Duration::from_millis((self.base_delay_ms as f64 * factor).min(60_000.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_id: String,
    pub api_key_env: String,
    pub temperature_generate: f64,
    pub temperature_answer: f64,
    pub max_tokens: u32,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model_id: "mock".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature_generate: 0.7,
            temperature_answer: 0.0,
            max_tokens: 512,
            max_parallel: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
            mock_script: None,
            timeout_secs: 120,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        for t in [self.temperature_generate, self.temperature_answer] {
            if !t.is_finite() || t < 0.0 {
                return bad("temperatures must be finite and non-negative");
            }
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be at least 1");
        }
        if !self.retry.backoff_factor.is_finite() {
            return bad("retry.backoff_factor must be finite");
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        if self.model_id.trim().is_empty() {
            return bad("model_id must not be empty");
        }
        if self.kind == BackendKind::Http && self.base_url.is_none() {
            return bad("http backend requires base_url");
        }
        Ok(())
    }

    /// Digest of the fields that influence backend outputs. Cache location,
    /// parallelism and retry timing are excluded.
    pub fn output_digest(&self) -> String {
        json_digest(&(
            &self.kind,
            &self.base_url,
            &self.model_id,
            self.temperature_generate,
            self.temperature_answer,
            self.max_tokens,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: PromptBundle,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub stop: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: String,
    #[serde(default)]
    pub cached: bool,
}

/// Log-likelihood of a continuation given a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub sum_logprob: f64,
    pub mean_logprob: f64,
    pub per_token: Vec<TokenLogprob>,
}

impl ContinuationScore {
    pub fn from_tokens(per_token: Vec<TokenLogprob>) -> Result<Self, BackendError> {
        if per_token.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let sum_logprob: f64 = per_token.iter().map(|t| t.logprob).sum();
        Ok(ContinuationScore {
            sum_logprob,
            mean_logprob: sum_logprob / per_token.len() as f64,
            per_token,
        })
    }

    pub fn probability(&self) -> f64 {
        self.sum_logprob.exp()
    }
}

/// Failure of a single attempt, before the retry policy is applied.
#[derive(Debug)]
pub(crate) enum AttemptError {
    Transient(String),
    Fatal(BackendError),
}

pub(crate) trait Transport: Send + Sync {
    fn complete(
        &self,
        request: &CompletionRequest,
        model: &str,
    ) -> Result<Completion, AttemptError>;

    /// Per-token logprobs of `continuation` following `prompt`.
    fn score(
        &self,
        prompt: &str,
        continuation: &str,
        model: &str,
    ) -> Result<Vec<TokenLogprob>, AttemptError>;
}

/// Counting semaphore bounding in-flight transport calls.
struct Gate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            limit,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn enter(&self) -> GatePass<'_> {
        let mut active = self.active.lock().expect("gate lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate lock");
        }
        *active += 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("gate lock");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    attempts: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

const KEY_STRIPES: usize = 256;

pub struct Backend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    cache: Option<DiskCache>,
    gate: Gate,
    counters: Counters,
    key_locks: Vec<Mutex<()>>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("config", &self.config)
            .field("requests", &self.request_count())
            .finish_non_exhaustive()
    }
}

impl Backend {
    /// Builds the backend described by `config`. Mock backends load their
    /// script from `config.mock_script`; HTTP backends read the API key from
    /// the environment now, so a missing key fails before any request.
    pub fn from_config(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let transport: Box<dyn Transport> = match config.kind {
            BackendKind::Mock => {
                let path = config.mock_script.as_ref().ok_or_else(|| {
                    BackendError::Config("mock backend requires mock_script".into())
                })?;
                Box::new(MockScript::load(path)?)
            }
            BackendKind::Http => {
                let key = std::env::var(&config.api_key_env)
                    .map_err(|_| BackendError::MissingApiKey(config.api_key_env.clone()))?;
                let base = config.base_url.clone().expect("validated");
                Box::new(http::HttpTransport::new(
                    &base,
                    key,
                    Duration::from_secs(config.timeout_secs.max(1)),
                )?)
            }
        };
        Self::with_transport(config, transport)
    }

    /// A mock backend driven by an in-memory script.
    pub fn with_mock(config: BackendConfig, script: MockScript) -> Result<Self, BackendError> {
        config.validate()?;
        Self::with_transport(config, Box::new(script))
    }

    fn with_transport(
        config: BackendConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, BackendError> {
        let cache = config
            .cache_dir
            .as_deref()
            .map(DiskCache::open)
            .transpose()?;
        Ok(Backend {
            gate: Gate::new(config.max_parallel),
            config,
            transport,
            cache,
            counters: Counters::default(),
            key_locks: (0..KEY_STRIPES).map(|_| Mutex::new(())).collect(),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Backend calls made so far, one per cache miss.
    pub fn request_count(&self) -> u64 {
        self.counters.requests.load(Ordering::SeqCst)
    }

    /// Transport attempts made so far, counting retries.
    pub fn attempt_count(&self) -> u64 {
        self.counters.attempts.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous transport calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.counters.peak_in_flight.load(Ordering::SeqCst)
    }

    fn key_lock(&self, digest: &str) -> std::sync::MutexGuard<'_, ()> {
        let stripe = usize::from_str_radix(&digest[..4], 16).unwrap_or(0) % KEY_STRIPES;
        self.key_locks[stripe].lock().expect("key lock")
    }

    /// Runs `call` under the retry policy, inside the concurrency gate.
    fn with_retry<T>(
        &self,
        mut call: impl FnMut() -> Result<T, AttemptError>,
    ) -> Result<T, BackendError> {
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.counters.attempts.fetch_add(1, Ordering::SeqCst);
            let outcome = {
                let _pass = self.gate.enter();
                let now = self.counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                self.counters
                    .peak_in_flight
                    .fetch_max(now, Ordering::SeqCst);
                let outcome = call();
                self.counters.in_flight.fetch_sub(1, Ordering::SeqCst);
                outcome
            };
            match outcome {
                Ok(value) => return Ok(value),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(message)) => {
                    if attempt >= policy.max_attempts {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("attempt {attempt} failed ({message}); retrying");
                    std::thread::sleep(policy.delay(attempt));
                }
            }
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let key = CacheKey::completion(&self.config.model_id, request);
        let Some(cache) = &self.cache else {
            return self.with_retry(|| self.transport.complete(request, &self.config.model_id));
        };
        let digest = key.digest();
        let _guard = self.key_lock(&digest);
        if let Some(mut hit) = cache.get(&digest)? {
            hit.cached = true;
            return Ok(hit);
        }
        let completion =
            self.with_retry(|| self.transport.complete(request, &self.config.model_id))?;
        cache.put(&digest, &key, &completion)?;
        Ok(completion)
    }

    /// log P(continuation | prompt), summed and averaged over continuation
    /// tokens only.
    pub fn score_continuation(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let fetch = || {
            let tokens = self.with_retry(|| {
                self.transport
                    .score(prompt, continuation, &self.config.model_id)
            })?;
            if let Some(bad) = tokens
                .iter()
                .find(|t| t.logprob.is_nan() || t.logprob > 0.0)
            {
                return Err(BackendError::Protocol {
                    status: 200,
                    body: format!("invalid logprob {} for token {:?}", bad.logprob, bad.token),
                });
            }
            Ok(tokens)
        };
        let tokens = match &self.cache {
            None => fetch()?,
            Some(cache) => {
                let key = CacheKey::score(&self.config.model_id, prompt, continuation);
                let digest = key.digest();
                let _guard = self.key_lock(&digest);
                match cache.get(&digest)? {
                    Some(hit) => hit.token_logprobs.unwrap_or_default(),
                    None => {
                        let tokens = fetch()?;
                        let stored = Completion {
                            text: continuation.to_string(),
                            token_logprobs: Some(tokens.clone()),
                            finish_reason: "score".into(),
                            cached: false,
                        };
                        cache.put(&digest, &key, &stored)?;
                        tokens
                    }
                }
            }
        };
        ContinuationScore::from_tokens(tokens)
    }

    /// Completes every request with at most `max_parallel` in flight.
    /// Results line up with `requests`; failures are reported per index.
    pub fn batch_complete(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<Result<Completion, BackendError>> {
        parallel_map(requests, self.config.max_parallel, |r| self.complete(r))
    }
}

/// Maps `f` over `items` on up to `workers` scoped threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else {
                    break;
                };
                let result = f(item);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

/// Digest identifying a prompt's text, as used by mock script `hash` matchers.
pub fn prompt_hash(text: &str) -> String {
    sha256_hex(text)
}
