//! Provider-agnostic chat/embedding gateway.
//!
//! Every LLM call in the pipeline goes through [`Gateway::complete`], which
//! layers an on-disk response cache, a sliding-window rate limiter, and
//! exponential backoff over a pluggable [`Transport`].

mod cache;
mod clock;
mod http;
mod mock;
mod ratelimit;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{content_hash, hash_fields};

pub use cache::ResponseCache;
pub use clock::{Clock, FakeClock, SystemClock};
pub use http::HttpTransport;
pub(crate) use http::{build_agent, check_status, map_ureq_error};
pub use mock::{MockMatch, MockReply, MockScript, MockStep, MockTransport, UNSCRIPTED_PREFIX};
pub use ratelimit::RateLimiter;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last_error}")]
    ExhaustedRetries { attempts: u32, last_error: String },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("provider returned no text: {0}")]
    MalformedResponse(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
}

impl GatewayError {
    /// Errors caused by configuration rather than the provider at runtime.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            GatewayError::Config(_) | GatewayError::MissingApiKey(_) | GatewayError::Auth { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be > 0".into()));
        }
        Ok(())
    }

    /// Key used by mock scripts: independent of decoding settings.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.template_id, &self.system_prompt, &self.user_prompt)
    }
}

pub fn prompt_hash(template_id: &str, system_prompt: &str, user_prompt: &str) -> String {
    hash_fields(&[template_id, system_prompt, user_prompt])
}

/// Cache key over everything that changes the provider's answer.
pub fn cache_key(request: &ChatRequest, model: &str) -> String {
    hash_fields(&[
        &request.template_id,
        &request.system_prompt,
        &request.user_prompt,
        &format!("{:.6}", request.temperature),
        model,
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider: String,
    pub model: String,
    pub attempt_count: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpOpenaiCompatible,
    Mock,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::HttpOpenaiCompatible => "http_openai_compatible",
            ProviderKind::Mock => "mock",
        }
    }
}

fn default_max_attempts() -> u32 {
    4
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_rpm() -> u32 {
    60
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_model() -> String {
    "mock-1".into()
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Mock only: path to a JSON [`MockScript`].
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    /// Mock only: an in-memory script, takes precedence over `script_path`.
    #[serde(skip)]
    pub script: Option<Arc<MockScript>>,
}

impl ProviderConfig {
    pub fn mock() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model: default_model(),
            base_url: None,
            api_key_env: default_api_key_env(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
            requests_per_minute: 100_000,
            cache_dir: None,
            timeout_secs: default_timeout_secs(),
            script_path: None,
            script: None,
        }
    }

    pub fn with_script(mut self, script: MockScript) -> Self {
        self.script = Some(Arc::new(script));
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_attempts < 1 {
            return Err(GatewayError::Config("max_attempts must be >= 1".into()));
        }
        if self.requests_per_minute < 1 {
            return Err(GatewayError::Config("requests_per_minute must be >= 1".into()));
        }
        if self.kind == ProviderKind::HttpOpenaiCompatible && self.base_url.is_none() {
            return Err(GatewayError::Config("http provider requires base_url".into()));
        }
        Ok(())
    }
}

/// Mock provider config answering from a prompt-hash → text table.
pub fn script_mock(script: BTreeMap<String, String>) -> ProviderConfig {
    let responses = script.into_iter().map(|(k, v)| (k, MockReply::Text(v))).collect();
    ProviderConfig::mock().with_script(MockScript {
        responses,
        ..MockScript::default()
    })
}

/// Raw provider answer before gateway bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// `None` when the provider response carried no text field.
    pub text: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// 429, 5xx, timeouts, connection failures.
    #[error("transient: {0}")]
    Transient(String),
    #[error("auth rejected (HTTP {0})")]
    Auth(u16),
    #[error("{0}")]
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn chat(&self, request: &ChatRequest, model: &str) -> Result<Completion, TransportError>;
    fn embed(&self, texts: &[String], model: &str) -> Result<Vec<Vec<f64>>, TransportError>;
}

/// Backoff before retry number `attempt + 1`:
/// `base × 2^(attempt−1)` scaled by a jitter factor in [0.8, 1.2].
///
/// Jitter is derived from `key` so runs are reproducible.
pub fn backoff_delay(base_ms: u64, attempt: u32, key: &str) -> Duration {
    let exp = attempt.saturating_sub(1).min(30);
    let nominal = base_ms.saturating_mul(1u64 << exp) as f64;
    let digest = content_hash(&format!("{key}:{attempt}"));
    let bits = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
    let unit = bits as f64 / u64::MAX as f64;
    let factor = 0.8 + 0.4 * unit;
    Duration::from_micros((nominal * factor * 1000.0).round() as u64)
}

pub struct Gateway {
    config: ProviderConfig,
    transport: Box<dyn Transport>,
    cache: Option<ResponseCache>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("kind", &self.config.kind)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        Self::with_clock(config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(config: ProviderConfig, clock: Arc<dyn Clock>) -> Result<Self, GatewayError> {
        config.validate()?;
        let transport: Box<dyn Transport> = match config.kind {
            ProviderKind::Mock => {
                let script = match (&config.script, &config.script_path) {
                    (Some(script), _) => script.as_ref().clone(),
                    (None, Some(path)) => {
                        MockScript::load(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?
                    }
                    (None, None) => MockScript::default(),
                };
                Box::new(MockTransport::new(script))
            }
            ProviderKind::HttpOpenaiCompatible => {
                let key = std::env::var(&config.api_key_env)
                    .map_err(|_| GatewayError::MissingApiKey(config.api_key_env.clone()))?;
                let base_url = config.base_url.clone().unwrap_or_default();
                Box::new(HttpTransport::new(
                    base_url,
                    key,
                    Duration::from_secs(config.timeout_secs),
                ))
            }
        };
        Self::with_transport(config, transport, clock)
    }

    pub fn with_transport(
        config: ProviderConfig,
        transport: Box<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = match &config.cache_dir {
            Some(dir) => Some(
                ResponseCache::open(dir)
                    .map_err(|e| GatewayError::Config(format!("cache dir {}: {e}", dir.display())))?,
            ),
            None => None,
        };
        let limiter = RateLimiter::new(config.requests_per_minute, clock.clone());
        Ok(Self {
            config,
            transport,
            cache,
            limiter,
            clock,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn provider_name(&self) -> &'static str {
        self.config.kind.as_str()
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let key = cache_key(request, &self.config.model);
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&key) {
                hit.cached = true;
                return Ok(hit);
            }
        }

        let (completion, attempts) = self.retrying(&key, || self.transport.chat(request, &self.config.model))?;
        let text = completion
            .text
            .ok_or_else(|| GatewayError::MalformedResponse(format!("template {}", request.template_id)))?;
        let response = ChatResponse {
            text,
            provider: self.provider_name().to_string(),
            model: self.config.model.clone(),
            attempt_count: attempts,
            input_tokens: completion.input_tokens,
            output_tokens: completion.output_tokens,
            cached: false,
        };
        if let Some(cache) = &self.cache {
            if !response.text.is_empty() {
                if let Err(err) = cache.put(&key, &response) {
                    tracing::warn!(%err, "failed to write response cache entry");
                }
            }
        }
        Ok(response)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let key = hash_fields(&texts.iter().map(String::as_str).collect::<Vec<_>>());
        let (vectors, _) = self.retrying(&key, || self.transport.embed(texts, &self.config.model))?;
        if vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(GatewayError::MalformedResponse("embedding dimensions differ".into()));
            }
        }
        Ok(vectors)
    }

    /// Runs `call` under this provider's rate limit and retry policy.
    /// Returns the value and the number of attempts used. Also used for
    /// auxiliary HTTP traffic (web search, page fetches) so it shares the
    /// same budget.
    pub fn retrying<T>(
        &self,
        key: &str,
        mut call: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<(T, u32), GatewayError> {
        let max = self.config.max_attempts;
        let mut attempt = 1;
        loop {
            self.limiter.acquire();
            match call() {
                Ok(value) => return Ok((value, attempt)),
                Err(TransportError::Transient(msg)) => {
                    if attempt >= max {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: attempt,
                            last_error: msg,
                        });
                    }
                    let delay = backoff_delay(self.config.backoff_base_ms, attempt, key);
                    tracing::debug!(attempt, ?delay, %msg, "transient provider failure, backing off");
                    self.clock.sleep(delay);
                    attempt += 1;
                }
                Err(TransportError::Auth(status)) => return Err(GatewayError::Auth { status }),
                Err(TransportError::Fatal(msg)) => return Err(GatewayError::Provider(msg)),
            }
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str) -> ChatRequest {
        ChatRequest {
            template_id: "t".into(),
            system_prompt: "sys".into(),
            user_prompt: user.into(),
            temperature: 0.3,
            max_output_tokens: 64,
            seed_hint: None,
        }
    }

    fn fake_gateway(config: ProviderConfig) -> (Gateway, Arc<FakeClock>) {
        let clock = Arc::new(FakeClock::new());
        (Gateway::with_clock(config, clock.clone()).unwrap(), clock)
    }

    #[test]
    fn fail_twice_then_succeed_counts_attempts() {
        let req = request("P");
        let mut script = MockScript::default();
        script.responses.insert(
            req.prompt_hash(),
            MockReply::Sequence(vec![
                MockStep::Status { status: 503 },
                MockStep::Status { status: 429 },
                MockStep::Text("done".into()),
            ]),
        );
        let (gw, clock) = fake_gateway(ProviderConfig::mock().with_script(script));
        let resp = gw.complete(&req).unwrap();
        assert_eq!(resp.text, "done");
        assert_eq!(resp.attempt_count, 3);
        let sleeps = clock.sleeps();
        assert_eq!(sleeps.len(), 2);
        assert!(sleeps[1] >= sleeps[0]);
    }

    #[test]
    fn exhausted_retries_and_auth_errors() {
        let req = request("P");
        let mut script = MockScript::default();
        script.responses.insert(
            req.prompt_hash(),
            MockReply::Sequence(vec![MockStep::Timeout { timeout: true }]),
        );
        let mut config = ProviderConfig::mock().with_script(script);
        config.max_attempts = 3;
        let (gw, _) = fake_gateway(config);
        match gw.complete(&req).unwrap_err() {
            GatewayError::ExhaustedRetries { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }

        let mut script = MockScript::default();
        script.responses.insert(
            req.prompt_hash(),
            MockReply::Sequence(vec![MockStep::Status { status: 401 }, MockStep::Text("x".into())]),
        );
        let (gw, clock) = fake_gateway(ProviderConfig::mock().with_script(script));
        assert!(matches!(gw.complete(&req), Err(GatewayError::Auth { status: 401 })));
        assert!(clock.sleeps().is_empty());
    }

    #[test]
    fn malformed_response_is_reported() {
        let req = request("P");
        let mut script = MockScript::default();
        script.responses.insert(
            req.prompt_hash(),
            MockReply::Sequence(vec![MockStep::Malformed { malformed: true }]),
        );
        let (gw, _) = fake_gateway(ProviderConfig::mock().with_script(script));
        assert!(matches!(gw.complete(&req), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn cache_hit_is_byte_identical_and_skips_transport() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("cache me");
        let mut script = MockScript::default();
        script.responses.insert(
            req.prompt_hash(),
            MockReply::Sequence(vec![MockStep::Text("first".into()), MockStep::Text("second".into())]),
        );
        let mut config = ProviderConfig::mock().with_script(script);
        config.cache_dir = Some(dir.path().to_path_buf());
        let (gw, _) = fake_gateway(config);
        let a = gw.complete(&req).unwrap();
        let b = gw.complete(&req).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, "first");
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());

        let mut hotter = req.clone();
        hotter.temperature = 0.9;
        assert_ne!(cache_key(&req, "m"), cache_key(&hotter, "m"));
        assert_ne!(cache_key(&req, "m"), cache_key(&req, "other-model"));
    }

    #[test]
    fn backoff_is_non_decreasing_and_bounded() {
        let mut prev = Duration::ZERO;
        for attempt in 1..12 {
            let d = backoff_delay(100, attempt, "k");
            let nominal = 100.0 * 2f64.powi(attempt as i32 - 1);
            let ms = d.as_secs_f64() * 1000.0;
            assert!(ms >= nominal * 0.8 - 1e-6 && ms <= nominal * 1.2 + 1e-6);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn request_validation() {
        let mut req = request("x");
        req.temperature = 2.5;
        assert!(req.validate().is_err());
        assert!(request("  ").validate().is_err());
    }

    #[test]
    fn http_kind_requires_key() {
        let mut config = ProviderConfig::mock();
        config.kind = ProviderKind::HttpOpenaiCompatible;
        config.base_url = Some("http://127.0.0.1:1".into());
        config.api_key_env = "GROUNDSET_TEST_KEY_THAT_IS_NOT_SET".into();
        assert!(matches!(Gateway::new(config), Err(GatewayError::MissingApiKey(_))));
    }

    #[test]
    fn mock_embeddings_are_unit_and_deterministic() {
        let (gw, _) = fake_gateway(ProviderConfig::mock());
        let texts = vec!["saffron".to_string(), "rice".to_string(), "saffron".to_string()];
        let vecs = gw.embed(&texts).unwrap();
        assert_eq!(vecs.len(), 3);
        assert_eq!(vecs[0], vecs[2]);
        for v in &vecs {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            assert!((cosine(v, v) - 1.0).abs() < 1e-12);
        }
        assert!(gw.embed(&[]).is_err());
    }
}
