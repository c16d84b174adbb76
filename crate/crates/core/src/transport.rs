//! Chat-completion backends.
//!
//! [`ScriptedBackend`] replays fixture responses and is fully deterministic;
//! [`LiveBackend`] talks to an OpenAI-compatible HTTP endpoint. Either can be
//! wrapped in a [`RetryingBackend`].

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<f64> },
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("fixture script exhausted after {calls} calls")]
    FixtureExhausted { calls: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("bad backend configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<TransportError>,
    },
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::RateLimited { .. } | TransportError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub model: String,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            model: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if self.messages.is_empty() {
            return Err(TransportError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(TransportError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
        {
            return Err(TransportError::InvalidRequest(format!("empty {:?} message", m.role)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Seconds.
    pub latency: f64,
    /// True when token counts are the offline `ceil(chars / 4)` estimate.
    pub estimated: bool,
}

impl UsageRecord {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::AddAssign for UsageRecord {
    fn add_assign(&mut self, o: Self) {
        self.input_tokens += o.input_tokens;
        self.output_tokens += o.output_tokens;
        self.latency += o.latency;
        self.estimated |= o.estimated;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, TransportError>;

    /// Deterministic backends are never retried.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, TransportError> {
        (**self).complete(req)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Rough token count used when no provider usage is available.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Stable SHA-256 (hex) of the message list.
pub fn messages_hash(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_string(messages).expect("messages serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Sequence,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    #[serde(rename = "match")]
    pub match_mode: MatchMode,
    pub response: String,
    /// Message hash for `hash` fixtures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl Fixture {
    pub fn sequence(response: impl Into<String>) -> Self {
        Self {
            match_mode: MatchMode::Sequence,
            response: response.into(),
            key: None,
        }
    }
}

pub fn parse_fixtures(text: &str) -> Result<Vec<Fixture>, TransportError> {
    let fixtures: Vec<Fixture> = serde_json::from_str(text).map_err(|e| TransportError::Config(format!("fixtures: {e}")))?;
    if let Some(i) = fixtures.iter().position(|f| f.match_mode == MatchMode::Hash && f.key.is_none()) {
        return Err(TransportError::Config(format!("fixture {i}: hash fixture without key")));
    }
    Ok(fixtures)
}

pub fn load_fixtures(path: &Path) -> Result<Vec<Fixture>, TransportError> {
    let text = std::fs::read_to_string(path).map_err(|e| TransportError::Config(format!("{}: {e}", path.display())))?;
    parse_fixtures(&text)
}

/// Replays fixtures. A `hash` fixture answers whenever its key matches the
/// request messages; otherwise the next unused `sequence` fixture answers.
pub struct ScriptedBackend {
    fixtures: Vec<Fixture>,
    state: Mutex<ScriptState>,
}

#[derive(Default)]
struct ScriptState {
    cursor: usize,
    calls: usize,
}

impl ScriptedBackend {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        Self {
            fixtures,
            state: Mutex::new(ScriptState::default()),
        }
    }

    pub fn from_responses<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(Fixture::sequence).collect())
    }

    pub fn calls(&self) -> usize {
        self.state.lock().expect("script state").calls
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, TransportError> {
        req.validate()?;
        let mut state = self.state.lock().expect("script state");
        state.calls += 1;
        let hash = messages_hash(&req.messages);
        let keyed = self
            .fixtures
            .iter()
            .find(|f| f.match_mode == MatchMode::Hash && f.key.as_deref() == Some(hash.as_str()));
        let fixture = match keyed {
            Some(f) => f,
            None => {
                let next = self.fixtures[state.cursor.min(self.fixtures.len())..]
                    .iter()
                    .position(|f| f.match_mode == MatchMode::Sequence)
                    .map(|offset| state.cursor + offset);
                let Some(i) = next else {
                    return Err(TransportError::FixtureExhausted { calls: state.calls - 1 });
                };
                state.cursor = i + 1;
                &self.fixtures[i]
            }
        };
        let input: u64 = req.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        Ok(Completion {
            text: fixture.response.clone(),
            usage: UsageRecord {
                input_tokens: input,
                output_tokens: estimate_tokens(&fixture.response),
                latency: 0.0,
                estimated: true,
            },
            attempts: 1,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    pub base_url: String,
    /// Overrides the model named in requests.
    pub model: Option<String>,
    pub timeout_secs: f64,
    pub api_key_env: String,
    /// Log raw request and response bodies at debug level.
    pub debug_bodies: bool,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: None,
            timeout_secs: 120.0,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            debug_bodies: false,
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveBackend")
            .field("config", &self.config)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

/// Replaces every occurrence of `secret` in `text`.
pub fn redact(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        text.to_string()
    } else {
        text.replace(secret, "<redacted>")
    }
}

#[derive(Deserialize)]
struct ApiResponse {
    choices: Vec<ApiChoice>,
    #[serde(default)]
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct ApiChoice {
    message: ApiMessage,
}

#[derive(Deserialize)]
struct ApiMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ApiUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl LiveBackend {
    /// Reads the API key from the environment; fails before any network use.
    pub fn new(config: LiveConfig) -> Result<Self, TransportError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| TransportError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: LiveConfig, api_key: String) -> Result<Self, TransportError> {
        if config.timeout_secs.is_nan() || config.timeout_secs <= 0.0 {
            return Err(TransportError::Config("timeout_secs must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| TransportError::Config(e.to_string()))?;
        Ok(Self { config, api_key, client })
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, TransportError> {
        req.validate()?;
        let model = self.config.model.as_deref().unwrap_or(&req.model);
        let body = serde_json::json!({
            "model": model,
            "temperature": req.temperature,
            "messages": req.messages,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        if self.config.debug_bodies {
            log::debug!("POST {url} {}", redact(&body.to_string(), &self.api_key));
        }
        let started = Instant::now();
        let resp = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError::Transient(redact(&e.to_string(), &self.api_key)))?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<f64>().ok());
        let text = resp
            .text()
            .map_err(|e| TransportError::Transient(redact(&e.to_string(), &self.api_key)))?;
        let latency = started.elapsed().as_secs_f64();
        if self.config.debug_bodies {
            log::debug!("{status} {}", redact(&text, &self.api_key));
        }
        let code = status.as_u16();
        match code {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(format!("HTTP {code}"))),
            429 => return Err(TransportError::RateLimited { retry_after }),
            500..=599 => return Err(TransportError::Transient(format!("HTTP {code}"))),
            _ => {
                return Err(TransportError::Http {
                    status: code,
                    body: redact(&text, &self.api_key).chars().take(500).collect(),
                })
            }
        }
        let parsed: ApiResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Transient(format!("unreadable response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Transient("response has no message content".into()))?;
        let usage = match parsed.usage {
            Some(u) => UsageRecord {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
                latency,
                estimated: false,
            },
            None => UsageRecord {
                input_tokens: req.messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
                output_tokens: estimate_tokens(&content),
                latency,
                estimated: true,
            },
        };
        Ok(Completion {
            text: content,
            usage,
            attempts: 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            seed: 0,
        }
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

/// Retries rate-limit and transient errors with exponential backoff and
/// seeded jitter.
pub struct RetryingBackend<B> {
    inner: B,
    policy: RetryPolicy,
    rng: Mutex<StdRng>,
    sleep: Sleeper,
}

impl<B: ChatBackend> RetryingBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Result<Self, TransportError> {
        if policy.max_attempts == 0 {
            return Err(TransportError::Config("max_attempts must be at least 1".into()));
        }
        Ok(Self {
            inner,
            rng: Mutex::new(StdRng::seed_from_u64(policy.seed)),
            policy,
            sleep: Box::new(std::thread::sleep),
        })
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    /// Delay before retry number `retry` (1-based): `base·2^(retry−1)`,
    /// capped, scaled by a jitter factor in `[0.5, 1)`.
    fn backoff(&self, retry: u32) -> Duration {
        let exp = self.policy.base_delay.as_secs_f64() * 2f64.powi(retry.saturating_sub(1).min(30) as i32);
        let capped = exp.min(self.policy.max_delay.as_secs_f64());
        let jitter: f64 = self.rng.lock().expect("rng").random_range(0.5..1.0);
        Duration::from_secs_f64(capped * jitter)
    }
}

impl<B: ChatBackend> ChatBackend for RetryingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, TransportError> {
        if self.inner.is_deterministic() {
            return self.inner.complete(req);
        }
        let mut attempt = 1;
        loop {
            match self.inner.complete(req) {
                Ok(mut c) => {
                    c.attempts = attempt;
                    return Ok(c);
                }
                Err(e) if e.is_retryable() && attempt < self.policy.max_attempts => {
                    let mut delay = self.backoff(attempt);
                    if let TransportError::RateLimited { retry_after: Some(s) } = e {
                        delay = delay.max(Duration::from_secs_f64(s.clamp(0.0, 3600.0)));
                    }
                    log::warn!("attempt {attempt} failed ({e}); retrying in {:.2}s", delay.as_secs_f64());
                    (self.sleep)(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && attempt > 1 => {
                    return Err(TransportError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// How to build a backend; scripted backends are rebuilt fresh per session.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Scripted { path: PathBuf, fixtures: Vec<Fixture> },
    Live(LiveConfig),
}

impl BackendSpec {
    /// Parses `scripted:<fixtures.json>` or `live[:<config.json>]`.
    pub fn parse(spec: &str) -> Result<Self, TransportError> {
        match spec.split_once(':') {
            Some(("scripted", path)) => {
                let path = PathBuf::from(path);
                let fixtures = load_fixtures(&path)?;
                Ok(BackendSpec::Scripted { path, fixtures })
            }
            Some(("live", path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| TransportError::Config(format!("{path}: {e}")))?;
                let config = serde_json::from_str(&text).map_err(|e| TransportError::Config(format!("{path}: {e}")))?;
                Ok(BackendSpec::Live(config))
            }
            None if spec == "live" => Ok(BackendSpec::Live(LiveConfig::default())),
            _ => Err(TransportError::Config(format!(
                "backend `{spec}`: expected scripted:<file> or live[:<config>]"
            ))),
        }
    }

    pub fn build(&self, retry: RetryPolicy) -> Result<Box<dyn ChatBackend>, TransportError> {
        match self {
            BackendSpec::Scripted { fixtures, .. } => Ok(Box::new(ScriptedBackend::new(fixtures.clone()))),
            BackendSpec::Live(config) => Ok(Box::new(RetryingBackend::new(LiveBackend::new(config.clone())?, retry)?)),
        }
    }
}
