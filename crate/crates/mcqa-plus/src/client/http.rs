//! Blocking client for OpenAI-compatible chat-completions endpoints with
//! retry, exponential backoff, and optional token-bucket rate limiting.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    Backend, ClientError, CompletionRequest, LogprobMap, ModelResponse,
};

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "MCQA_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Endpoint base, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub system_prompt: Option<String>,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Requests per second; None disables rate limiting.
    pub requests_per_second: Option<f64>,
    pub timeout_secs: u64,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            system_prompt: None,
            max_retries: 3,
            backoff_base_ms: 250,
            requests_per_second: None,
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<PositionLogprobs>,
}

#[derive(Deserialize)]
struct PositionLogprobs {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

struct TokenBucket {
    tokens: f64,
    per_second: f64,
    last_refill: Instant,
}

impl TokenBucket {
    fn new(per_second: f64) -> Self {
        TokenBucket {
            tokens: 1.0,
            per_second,
            last_refill: Instant::now(),
        }
    }

    /// Time to wait before a token is available; takes the token when ready.
    fn wait_time(&mut self) -> Duration {
        let now = Instant::now();
        self.tokens = (self.tokens
            + now.duration_since(self.last_refill).as_secs_f64() * self.per_second)
            .min(self.per_second.max(1.0));
        self.last_refill = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Duration::ZERO
        } else {
            Duration::from_secs_f64((1.0 - self.tokens) / self.per_second)
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    bucket: Option<Mutex<TokenBucket>>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::BackendUnavailable(e.to_string()))?;
        let bucket = config
            .requests_per_second
            .map(|rps| Mutex::new(TokenBucket::new(rps)));
        Ok(HttpBackend {
            config,
            client,
            bucket,
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn throttle(&self) {
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = bucket.lock().expect("bucket lock").wait_time();
                if wait.is_zero() {
                    return;
                }
                std::thread::sleep(wait);
            }
        }
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<ModelResponse, AttemptOutcome> {
        self.throttle();
        let mut request = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| AttemptOutcome::Retryable(ClientError::BackendUnavailable(e.to_string())))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptOutcome::Fatal(ClientError::AuthError));
        }
        if status.as_u16() == 429 {
            return Err(AttemptOutcome::RateLimited);
        }
        if status.is_server_error() {
            return Err(AttemptOutcome::Retryable(ClientError::BackendUnavailable(
                format!("HTTP {status}"),
            )));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(AttemptOutcome::Fatal(ClientError::MalformedBackendReply(
                format!("HTTP {status}: {text}"),
            )));
        }
        let parsed: ChatResponse = response.json().map_err(|e| {
            AttemptOutcome::Fatal(ClientError::MalformedBackendReply(e.to_string()))
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            AttemptOutcome::Fatal(ClientError::MalformedBackendReply(
                "reply has no choices".into(),
            ))
        })?;
        let text = choice.message.content.ok_or_else(|| {
            AttemptOutcome::Fatal(ClientError::MalformedBackendReply(
                "choice has no message content".into(),
            ))
        })?;
        let logprobs = choice.logprobs.map(|lp| {
            lp.content
                .into_iter()
                .map(|position| {
                    let mut entries = BTreeMap::new();
                    entries.insert(position.token, position.logprob);
                    for top in position.top_logprobs {
                        entries.insert(top.token, top.logprob);
                    }
                    LogprobMap::top_k(entries, u32::from(body.top_logprobs.unwrap_or(0)))
                })
                .collect::<Vec<_>>()
        });
        Ok(ModelResponse {
            text,
            logprobs: logprobs.filter(|lp| !lp.is_empty()),
            model_id: parsed.model.unwrap_or_else(|| self.config.model.clone()),
            cached: false,
        })
    }
}

enum AttemptOutcome {
    Fatal(ClientError),
    Retryable(ClientError),
    RateLimited,
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelResponse, ClientError> {
        request.params.validate()?;
        let mut messages = Vec::new();
        if let Some(system) = &self.config.system_prompt {
            messages.push(ChatMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: request.prompt.text(),
        });
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            logprobs: request.params.want_logprobs,
            top_logprobs: request
                .params
                .want_logprobs
                .then_some(request.params.top_logprobs),
        };
        let attempts = self.config.max_retries.saturating_add(1);
        let mut last_retryable: Option<ClientError> = None;
        let mut rate_limited = false;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&body) {
                Ok(response) => return Ok(response),
                Err(AttemptOutcome::Fatal(e)) => return Err(e),
                Err(AttemptOutcome::RateLimited) => {
                    rate_limited = true;
                    warn!("rate limited by backend (attempt {}/{attempts})", attempt + 1);
                }
                Err(AttemptOutcome::Retryable(e)) => {
                    warn!("transient backend failure (attempt {}/{attempts}): {e}", attempt + 1);
                    last_retryable = Some(e);
                }
            }
        }
        if rate_limited {
            Err(ClientError::RateLimited(attempts))
        } else {
            Err(last_retryable
                .unwrap_or_else(|| ClientError::BackendUnavailable("retries exhausted".into())))
        }
    }
}
