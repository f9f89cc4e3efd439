//! Chat-completion access to OpenAI and Azure OpenAI deployments.
//!
//! [`Gateway`] wraps any [`ChatProvider`] with the retry policy, an optional
//! concurrency cap and secret redaction. [`HttpProvider`] speaks the
//! chat-completions wire format; [`MockProvider`] replays scripted responses
//! so every pipeline can run offline.

mod credentials;
mod http;
mod mock;

pub use credentials::{list_models, CredentialError, CredentialStore, CredentialSummary, BUILTIN_MODELS};
pub use http::{HttpProvider, DEFAULT_AZURE_API_VERSION, DEFAULT_OPENAI_BASE};
pub use mock::{MockOutcome, MockProvider};

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use url::Url;

/// An API key. Never printed in full.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    /// `****` followed by the last two characters.
    pub fn masked(&self) -> String {
        let chars: Vec<char> = self.0.chars().collect();
        let tail: String = if chars.len() > 2 {
            chars[chars.len() - 2..].iter().collect()
        } else {
            String::new()
        };
        format!("****{tail}")
    }

    /// Replaces every occurrence of the secret in `text` with its masked form.
    pub fn redact(&self, text: &str) -> String {
        if self.0.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.0, &self.masked())
        }
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Secret({})", self.masked())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    OpenAi,
    Azure,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::OpenAi => "OpenAI",
            ProviderKind::Azure => "Azure",
        })
    }
}

/// A credential plus everything needed to reach the provider.
///
/// For OpenAI profiles `endpoint` optionally overrides the API base URL
/// (OpenAI-compatible servers); `deployment_name` must be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub kind: ProviderKind,
    pub label: String,
    pub api_key: Secret,
    #[serde(default)]
    pub endpoint: Option<Url>,
    #[serde(default)]
    pub deployment_name: Option<String>,
}

impl ProviderProfile {
    pub fn openai(label: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::OpenAi,
            label: label.into(),
            api_key: Secret::new(api_key),
            endpoint: None,
            deployment_name: None,
        }
    }

    pub fn azure(
        label: impl Into<String>,
        api_key: impl Into<String>,
        endpoint: Url,
        deployment_name: impl Into<String>,
    ) -> Self {
        Self {
            kind: ProviderKind::Azure,
            label: label.into(),
            api_key: Secret::new(api_key),
            endpoint: Some(endpoint),
            deployment_name: Some(deployment_name.into()),
        }
    }

    pub fn validate(&self) -> Result<(), CredentialError> {
        if self.label.trim().is_empty() {
            return Err(CredentialError::InvalidProfile("label must not be empty".into()));
        }
        if self.api_key.expose().trim().is_empty() {
            return Err(CredentialError::InvalidProfile("api key must not be empty".into()));
        }
        let has_deployment = self.deployment_name.as_deref().is_some_and(|d| !d.trim().is_empty());
        match self.kind {
            ProviderKind::Azure if self.endpoint.is_none() || !has_deployment => Err(CredentialError::MissingAzureFields),
            ProviderKind::OpenAi if self.deployment_name.is_some() => Err(CredentialError::InvalidProfile(
                "openai profiles take no deployment name".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub top_p: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    4096
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self::for_model("gpt-4o")
    }
}

impl GenerationSettings {
    pub fn for_model(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.0,
            top_p: 0.0,
            max_output_tokens: default_max_output_tokens(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::InvalidSettings(msg));
        if self.model_id.trim().is_empty() {
            return bad("model id must not be empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return bad(format!("top_p {} outside [0, 1]", self.top_p));
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(settings: &GenerationSettings, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            model_id: settings.model_id.clone(),
            system: system.into(),
            user: user.into(),
            temperature: settings.temperature,
            top_p: settings.top_p,
            max_output_tokens: settings.max_output_tokens,
        }
    }

    /// SHA-256 over the canonical JSON form of the request.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: TokenUsage,
}

/// A failed provider round trip, before retry classification.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("http {status}: {message}")]
    Http { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Timeout | ProviderError::Unreachable(_) => true,
            ProviderError::ContextTooLong(_) | ProviderError::Malformed(_) => false,
        }
    }
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    async fn send(&self, request: &ChatRequest) -> Result<ProviderReply, ProviderError>;

    /// Secret to scrub from anything this provider's errors may echo back.
    fn secret(&self) -> Option<&Secret> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("authentication failed (http {status})")]
    AuthFailed { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider unreachable after {attempts} attempts: {detail}")]
    ProviderUnreachable { attempts: u32, detail: String },
    #[error("prompt exceeds the model context: {0}")]
    ContextTooLong(String),
    #[error("provider rejected the request (http {status}): {detail}")]
    Rejected { status: u16, detail: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid generation settings: {0}")]
    InvalidSettings(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Exponential backoff with jitter. Only 429, 5xx and transport failures are
/// retried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay_for(&self, retry: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << retry.saturating_sub(1).min(16));
        let capped = exp.min(self.max_delay);
        if self.jitter && !capped.is_zero() {
            let extra = rand::rng().random_range(0.0..=0.5);
            capped.mul_f64(1.0 + extra).min(self.max_delay)
        } else {
            capped
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub outcome: String,
    pub latency_ms: u64,
}

/// One completed request/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatExchange {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    /// The provider's text, untouched.
    pub raw_response: String,
    pub token_usage: TokenUsage,
    pub latency: Duration,
    pub attempts: Vec<AttemptRecord>,
}

impl ChatExchange {
    pub fn retries(&self) -> u32 {
        self.attempts.len().saturating_sub(1) as u32
    }
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    retry: RetryPolicy,
    limiter: Option<Arc<Semaphore>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("retry", &self.retry).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            provider,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Caps the number of requests in flight through this gateway (and its
    /// clones).
    pub fn with_concurrency_limit(mut self, permits: usize) -> Self {
        self.limiter = Some(Arc::new(Semaphore::new(permits.max(1))));
        self
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    fn scrub(&self, text: &str) -> String {
        match self.provider.secret() {
            Some(secret) => secret.redact(text),
            None => text.to_string(),
        }
    }

    pub async fn complete_chat(
        &self,
        settings: &GenerationSettings,
        system_text: &str,
        user_text: &str,
    ) -> Result<ChatExchange, GatewayError> {
        settings.validate()?;
        if system_text.trim().is_empty() || user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("system and user text must be non-empty".into()));
        }
        let request = ChatRequest::new(settings, system_text, user_text);
        let _permit = match &self.limiter {
            Some(sem) => Some(sem.clone().acquire_owned().await.expect("semaphore never closed")),
            None => None,
        };

        let max_attempts = self.retry.max_attempts.max(1);
        let started = Instant::now();
        let mut attempts = Vec::new();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let t0 = Instant::now();
            let result = self.provider.send(&request).await;
            let latency_ms = t0.elapsed().as_millis() as u64;
            match result {
                Ok(reply) => {
                    attempts.push(AttemptRecord {
                        attempt,
                        outcome: "ok".into(),
                        latency_ms,
                    });
                    return Ok(ChatExchange {
                        model_id: request.model_id,
                        system_text: request.system,
                        user_text: request.user,
                        raw_response: reply.text,
                        token_usage: reply.usage,
                        latency: started.elapsed(),
                        attempts,
                    });
                }
                Err(err) => {
                    let outcome = self.scrub(&err.to_string());
                    tracing::debug!(attempt, model = %request.model_id, %outcome, "chat attempt failed");
                    attempts.push(AttemptRecord {
                        attempt,
                        outcome: outcome.clone(),
                        latency_ms,
                    });
                    if !err.is_retryable() {
                        return Err(self.classify_final(err, attempt));
                    }
                    if attempt >= max_attempts {
                        return Err(self.classify_final(err, attempt));
                    }
                    tokio::time::sleep(self.retry.delay_for(attempt)).await;
                }
            }
        }
    }

    fn classify_final(&self, err: ProviderError, attempts: u32) -> GatewayError {
        match err {
            ProviderError::Http {
                status: status @ (401 | 403),
                ..
            } => GatewayError::AuthFailed { status },
            ProviderError::Http { status: 429, .. } => GatewayError::RateLimited { attempts },
            ProviderError::Http { status, message } if status >= 500 => GatewayError::ProviderUnreachable {
                attempts,
                detail: self.scrub(&format!("http {status}: {message}")),
            },
            ProviderError::Http { status, message } => GatewayError::Rejected {
                status,
                detail: self.scrub(&message),
            },
            ProviderError::Timeout => GatewayError::ProviderUnreachable {
                attempts,
                detail: "timed out".into(),
            },
            ProviderError::Unreachable(detail) => GatewayError::ProviderUnreachable {
                attempts,
                detail: self.scrub(&detail),
            },
            ProviderError::ContextTooLong(detail) => GatewayError::ContextTooLong(self.scrub(&detail)),
            ProviderError::Malformed(detail) => GatewayError::Malformed(self.scrub(&detail)),
        }
    }
}
