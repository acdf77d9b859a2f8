//! Chat-completion access shared by every pipeline stage.
//!
//! A [`Gateway`] wraps a [`Provider`] with a content-addressed response
//! cache, retry with exponential backoff for transient failures, and a
//! limit on concurrent in-flight provider calls.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::{HttpProvider, DEFAULT_API_KEY_ENV, DEFAULT_ENDPOINT};
pub use mock::{FnProvider, MockEntry, MockProvider, ScriptRecorder};

pub const DEFAULT_MODEL: &str = "gpt-4o-2024-08-06";
pub const DEFAULT_MAX_COMPLETION_TOKENS: u32 = 6000;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_completion_tokens: u32,
    pub model_id: String,
}

impl CompletionRequest {
    /// A request with temperature 0 and the default completion budget.
    pub fn new(model_id: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_completion_tokens: DEFAULT_MAX_COMPLETION_TOKENS,
            model_id: model_id.into(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        if self.max_completion_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_completion_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cache key: digest over every field, so requests that differ in any
    /// field never share an entry.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.model_id.as_str(),
            self.system_text.as_str(),
            self.user_text.as_str(),
            &self.temperature.to_string(),
            &self.max_completion_tokens.to_string(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Mock-script key: digest of the prompt with whitespace runs collapsed.
    pub fn prompt_key(&self) -> String {
        prompt_key(&self.system_text, &self.user_text)
    }

    /// The whitespace-normalized prompt the mock key is computed over.
    pub fn normalized_prompt(&self) -> String {
        normalized_prompt(&self.system_text, &self.user_text)
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized_prompt(system: &str, user: &str) -> String {
    format!("{}\n---\n{}", collapse_ws(system), collapse_ws(user))
}

pub fn prompt_key(system: &str, user: &str) -> String {
    hex::encode(Sha256::digest(normalized_prompt(system, user).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub from_cache: bool,
    pub attempt_count: u32,
}

/// Failure reported by a provider for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Worth retrying: rate limits, timeouts, 5xx.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("no scripted reply for prompt key {key}")]
    MockMiss { key: String },
    #[error("provider error: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("mock has no scripted reply for prompt key {key}")]
    MockMiss { key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Backend that turns a request into reply text.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, failed_attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(failed_attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding concurrent provider calls.
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
}

impl GatewayStats {
    pub fn cache_hit_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    provider_calls: AtomicU64,
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: Limiter,
    in_flight: usize,
    counters: Counters,
    recorder: Option<Arc<ScriptRecorder>>,
}

impl Gateway {
    /// Gateway with an in-memory cache, default retry policy and the default
    /// parallelism limit.
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_PARALLELISM),
            in_flight: DEFAULT_PARALLELISM,
            counters: Counters::default(),
            recorder: None,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, in_flight: usize) -> Self {
        self.limiter = Limiter::new(in_flight);
        self.in_flight = in_flight.max(1);
        self
    }

    /// Records every completed exchange so it can be saved as a mock script.
    pub fn with_recorder(mut self, recorder: Arc<ScriptRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    /// Maximum number of provider calls in flight.
    pub fn parallelism(&self) -> usize {
        self.in_flight
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.counters.requests.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            provider_calls: self.counters.provider_calls.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        request.validate()?;
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let key = request.cache_key();
        if let Some(text) = self.cache.get(&key)? {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            self.record(request, &text);
            return Ok(CompletionResponse {
                text,
                from_cache: true,
                attempt_count: 1,
            });
        }

        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.counters.provider_calls.fetch_add(1, Ordering::Relaxed);
            match self.provider.complete(request) {
                Ok(text) => {
                    self.cache.put(&key, &text)?;
                    self.record(request, &text);
                    return Ok(CompletionResponse {
                        text,
                        from_cache: false,
                        attempt_count: attempt,
                    });
                }
                Err(ProviderError::Transient(msg)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: attempt,
                            last: msg,
                        });
                    }
                    log::debug!("attempt {attempt} failed ({msg}); retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(ProviderError::Auth(msg)) => return Err(GatewayError::Auth(msg)),
                Err(ProviderError::MockMiss { key }) => return Err(GatewayError::MockMiss { key }),
                Err(ProviderError::Fatal(msg)) => return Err(GatewayError::Provider(msg)),
            }
        }
    }

    fn record(&self, request: &CompletionRequest, reply: &str) {
        if let Some(r) = &self.recorder {
            r.record(request, reply);
        }
    }
}
