//! Chat-completion access.
//!
//! [`ChatGateway`] has three implementations: [`LiveGateway`] talks to an
//! HTTP chat-completions endpoint through a [`Transport`], with leaky-bucket
//! rate limiting, exponential backoff and a spending budget;
//! [`ScriptedGateway`] replays recorded responses keyed by a digest of the
//! request; [`CaptureGateway`] wraps another gateway and records every
//! exchange into a script file for later replay.
//!
//! All timing goes through [`Clock`] so tests run on [`SimClock`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptMessage;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no scripted response for request {0}")]
    ScriptMiss(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("request of {amount} exceeds rate limiter capacity {capacity}")]
    OversizeRequest { amount: f64, capacity: f64 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("script file {path}: {message}")]
    Script { path: PathBuf, message: String },
}

/// Monotonic time in seconds plus the ability to wait.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
    fn sleep(&self, seconds: f64);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn sleep(&self, seconds: f64) {
        if seconds > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(seconds));
        }
    }
}

/// Simulated clock: `sleep` advances time instantly and is recorded.
#[derive(Default)]
pub struct SimClock {
    inner: Mutex<(f64, Vec<f64>)>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, seconds: f64) {
        self.inner.lock().unwrap().0 += seconds;
    }

    pub fn sleeps(&self) -> Vec<f64> {
        self.inner.lock().unwrap().1.clone()
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        self.inner.lock().unwrap().0
    }

    fn sleep(&self, seconds: f64) {
        let mut g = self.inner.lock().unwrap();
        g.0 += seconds.max(0.0);
        g.1.push(seconds);
    }
}

/// Slack for floating-point leak arithmetic when comparing against capacity.
const LEVEL_EPSILON: f64 = 1e-9;

/// Leaky bucket: the level drains at `rate` per second, and work is admitted
/// only while the level stays within `capacity`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakyBucket {
    pub capacity: f64,
    pub rate: f64,
    pub level: f64,
    pub last_update: f64,
}

impl LeakyBucket {
    pub fn new(capacity: f64, rate: f64) -> Self {
        assert!(capacity > 0.0 && rate > 0.0, "capacity and rate must be positive");
        Self { capacity, rate, level: 0.0, last_update: 0.0 }
    }

    /// Leaks up to `now`, then either admits `amount` (returning zero) or
    /// returns how long to wait before it would fit. Nothing is added when a
    /// wait is returned.
    pub fn acquire(&mut self, amount: f64, now: f64) -> Result<f64, GatewayError> {
        if amount > self.capacity {
            return Err(GatewayError::OversizeRequest { amount, capacity: self.capacity });
        }
        let elapsed = (now - self.last_update).max(0.0);
        self.level = (self.level - self.rate * elapsed).max(0.0);
        self.last_update = self.last_update.max(now);
        if self.level + amount <= self.capacity + LEVEL_EPSILON {
            self.level = (self.level + amount).min(self.capacity);
            Ok(0.0)
        } else {
            Ok((self.level + amount - self.capacity) / self.rate)
        }
    }
}

/// Shared bucket that blocks callers until they are admitted.
pub struct RateLimiter {
    bucket: Mutex<LeakyBucket>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(bucket: LeakyBucket, clock: Arc<dyn Clock>) -> Self {
        Self { bucket: Mutex::new(bucket), clock }
    }

    /// Waits until `amount` is admitted; returns the admission time.
    pub fn wait(&self, amount: f64) -> Result<f64, GatewayError> {
        loop {
            let (wait, now) = {
                let mut bucket = self.bucket.lock().unwrap();
                let now = self.clock.now();
                (bucket.acquire(amount, now)?, now)
            };
            if wait <= 0.0 {
                return Ok(now);
            }
            self.clock.sleep(wait);
        }
    }

    pub fn level(&self) -> f64 {
        self.bucket.lock().unwrap().level
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<PromptMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    /// Stable hex digest of model, temperature and the role/content pairs.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.model.as_bytes());
        field(format!("{}", self.temperature).as_bytes());
        for m in &self.messages {
            field(m.role.as_str().as_bytes());
            field(m.content.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Request body for a chat-completions endpoint.
    pub fn wire_body(&self) -> Value {
        let temperature = if self.temperature.fract() == 0.0 && self.temperature.abs() < 1e15 {
            json!(self.temperature as i64)
        } else {
            json!(self.temperature)
        };
        let messages: Vec<Value> =
            self.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
        let mut body = json!({"model": self.model, "messages": messages, "temperature": temperature});
        if let Some(max) = self.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ChatResponse {
    pub fn from_wire(body: &str) -> Result<Self, GatewayError> {
        let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::BadResponse("no choices[0].message.content".into()))?;
        Ok(ChatResponse {
            content: content.to_string(),
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageCounters {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageCounters {
    pub fn record(&mut self, response: &ChatResponse) {
        self.calls += 1;
        self.prompt_tokens += response.prompt_tokens;
        self.completion_tokens += response.completion_tokens;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

pub trait ChatGateway: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<G: ChatGateway + ?Sized> ChatGateway for Arc<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for Box<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub key: String,
    pub content: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, GatewayError> {
    let err = |message: String| GatewayError::Script { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

pub fn write_script(path: &Path, entries: &[ScriptEntry]) -> Result<(), GatewayError> {
    let err = |message: String| GatewayError::Script { path: path.to_path_buf(), message };
    let text = serde_json::to_string_pretty(entries).map_err(|e| err(e.to_string()))?;
    crate::state::write_atomic(path, text.as_bytes()).map_err(|e| err(e.to_string()))
}

/// Replays recorded responses. In single-use mode every entry answers at
/// most once, so a repeated request shows up as a [`GatewayError::ScriptMiss`].
pub struct ScriptedGateway {
    entries: BTreeMap<String, ScriptEntry>,
    single_use: bool,
    state: Mutex<(BTreeSet<String>, Vec<String>)>,
}

impl ScriptedGateway {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key.clone(), e)).collect(),
            single_use: false,
            state: Mutex::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::new(load_script(path)?))
    }

    pub fn single_use(mut self) -> Self {
        self.single_use = true;
        self
    }

    /// Keys requested so far, in call order, including misses.
    pub fn call_log(&self) -> Vec<String> {
        self.state.lock().unwrap().1.clone()
    }

    /// Entries not yet answered.
    pub fn unused(&self) -> Vec<ScriptEntry> {
        let used = &self.state.lock().unwrap().0;
        self.entries.values().filter(|e| !used.contains(&e.key)).cloned().collect()
    }
}

impl ChatGateway for ScriptedGateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request.key();
        let mut state = self.state.lock().unwrap();
        state.1.push(key.clone());
        let entry = self.entries.get(&key).ok_or_else(|| GatewayError::ScriptMiss(key.clone()))?;
        if !state.0.insert(key.clone()) && self.single_use {
            return Err(GatewayError::ScriptMiss(key));
        }
        Ok(ChatResponse {
            content: entry.content.clone(),
            prompt_tokens: entry.prompt_tokens,
            completion_tokens: entry.completion_tokens,
        })
    }
}

/// Forwards to another gateway and appends each exchange to a script file.
pub struct CaptureGateway<G> {
    inner: G,
    path: PathBuf,
    entries: Mutex<Vec<ScriptEntry>>,
}

impl<G: ChatGateway> CaptureGateway<G> {
    /// Existing entries in `path`, if any, are kept.
    pub fn new(inner: G, path: PathBuf) -> Result<Self, GatewayError> {
        let entries = if path.exists() { load_script(&path)? } else { Vec::new() };
        Ok(Self { inner, path, entries: Mutex::new(entries) })
    }
}

impl<G: ChatGateway> ChatGateway for CaptureGateway<G> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        let mut entries = self.entries.lock().unwrap();
        let key = request.key();
        if !entries.iter().any(|e| e.key == key) {
            entries.push(ScriptEntry {
                key,
                content: response.content.clone(),
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
            });
            write_script(&self.path, &entries)?;
        }
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<HttpReply, TransportError>;
}

/// Blocking HTTPS transport with bearer-token auth.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_API_KEY_VAR: &str = "OPENAI_API_KEY";

impl HttpTransport {
    pub fn new(endpoint: &str, api_key_var: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let api_key = std::env::var(api_key_var).map_err(|_| GatewayError::MissingApiKey(api_key_var.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.to_string(), api_key })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, body: &Value) -> Result<HttpReply, TransportError> {
        let resp = self.client.post(&self.endpoint).bearer_auth(&self.api_key).json(body).send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Connect(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackoffPolicy {
    pub initial: f64,
    pub factor: f64,
    /// Relative jitter: each delay is scaled by a uniform factor in
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub max_attempts: u32,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self { initial: 1.0, factor: 2.0, jitter: 0.2, max_attempts: 6 }
    }
}

impl BackoffPolicy {
    /// Delay after the `failures`-th consecutive failure (1-based).
    pub fn delay(&self, failures: u32, rng: &mut impl Rng) -> f64 {
        let base = self.initial * self.factor.powi(failures.saturating_sub(1) as i32);
        let scale = if self.jitter > 0.0 { rng.random_range(1.0 - self.jitter..=1.0 + self.jitter) } else { 1.0 };
        base * scale
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Budget {
    pub max_calls: Option<u64>,
    pub max_total_tokens: Option<u64>,
}

pub struct LiveGateway {
    transport: Box<dyn Transport>,
    limiter: Option<Arc<RateLimiter>>,
    clock: Arc<dyn Clock>,
    backoff: BackoffPolicy,
    budget: Budget,
    rng: Mutex<StdRng>,
    usage: Mutex<UsageCounters>,
}

impl LiveGateway {
    pub fn new(transport: Box<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        Self {
            transport,
            limiter: None,
            clock,
            backoff: BackoffPolicy::default(),
            budget: Budget::default(),
            rng: Mutex::new(StdRng::from_os_rng()),
            usage: Mutex::default(),
        }
    }

    pub fn with_rate_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_backoff(mut self, backoff: BackoffPolicy) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.lock().unwrap() = StdRng::seed_from_u64(seed);
        self
    }

    pub fn usage(&self) -> UsageCounters {
        *self.usage.lock().unwrap()
    }

    fn check_budget(&self) -> Result<(), GatewayError> {
        let usage = self.usage();
        if let Some(max) = self.budget.max_calls {
            if usage.calls >= max {
                return Err(GatewayError::BudgetExceeded(format!("{} calls made, limit {max}", usage.calls)));
            }
        }
        if let Some(max) = self.budget.max_total_tokens {
            if usage.total_tokens() >= max {
                return Err(GatewayError::BudgetExceeded(format!("{} tokens used, limit {max}", usage.total_tokens())));
            }
        }
        Ok(())
    }
}

fn is_transient(status: u16) -> bool {
    status == 429 || status == 408 || (500..600).contains(&status)
}

impl ChatGateway for LiveGateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.check_budget()?;
        let body = request.wire_body();
        let mut failures = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.wait(1.0)?;
            }
            let last = match self.transport.post_json(&body) {
                Ok(reply) if reply.status == 200 => {
                    let response = ChatResponse::from_wire(&reply.body)?;
                    self.usage.lock().unwrap().record(&response);
                    return Ok(response);
                }
                Ok(reply) if !is_transient(reply.status) => {
                    return Err(GatewayError::Http { status: reply.status, body: reply.body });
                }
                Ok(reply) => format!("HTTP {}", reply.status),
                Err(e) => e.to_string(),
            };
            failures += 1;
            if failures >= self.backoff.max_attempts {
                return Err(GatewayError::RetriesExhausted { attempts: failures, last });
            }
            let delay = self.backoff.delay(failures, &mut *self.rng.lock().unwrap());
            log::warn!("chat request failed ({last}); retrying in {delay:.1}s");
            self.clock.sleep(delay);
        }
    }
}
