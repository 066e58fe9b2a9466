//! Backend contract for obtaining completions and token logprobs: a
//! deterministic mock, an OpenAI-compatible HTTP client, and a persistent
//! response cache keyed by content digests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::DerivedQuestion;
use crate::prompting::Prompt;

mod cache;
mod http;
mod mock;

pub use cache::ResponseCache;
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{mock_complete, MockBackend, MockPolicy};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("backend rejected credentials")]
    AuthError,
    #[error("rate limited after {0} attempt(s)")]
    RateLimited(u32),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("mock policy has no scores for item {0:?}")]
    UnknownItem(String),
    #[error("mock backend needs question metadata on the request")]
    MissingMetadata,
    #[error("cache entry {0} is corrupt")]
    CacheCorrupt(String),
    #[error("invalid decode params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoding parameters. Evaluation defaults to greedy decoding so runs are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            max_tokens: 16,
            want_logprobs: false,
            top_logprobs: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.temperature < 0.0 {
            return Err(ClientError::InvalidParams(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidParams("max_tokens must be positive".into()));
        }
        if self.top_logprobs > 20 {
            return Err(ClientError::InvalidParams(format!(
                "top_logprobs {} > 20",
                self.top_logprobs
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("params serialize"));
        hex::encode(hasher.finalize())
    }
}

/// Logprob coverage: the mock backend reports its whole synthetic
/// vocabulary; HTTP backends report the top-k tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Full,
    TopK(u32),
}

/// Per-position token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobMap {
    pub entries: BTreeMap<String, f64>,
    pub coverage: Coverage,
}

impl LogprobMap {
    /// Full-coverage map; entries must sum to one (within 1e-6) after
    /// exponentiation. Zero-probability tokens are simply omitted.
    pub fn full(entries: BTreeMap<String, f64>) -> Result<Self, ClientError> {
        let total: f64 = entries.values().map(|lp| lp.exp()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(ClientError::MalformedBackendReply(format!(
                "full-coverage probabilities sum to {total}, not 1"
            )));
        }
        Ok(LogprobMap {
            entries,
            coverage: Coverage::Full,
        })
    }

    pub fn top_k(entries: BTreeMap<String, f64>, k: u32) -> Self {
        LogprobMap {
            entries,
            coverage: Coverage::TopK(k),
        }
    }
}

/// A completion plus optional logprobs and cache provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub logprobs: Option<Vec<LogprobMap>>,
    pub model_id: String,
    pub cached: bool,
}

/// One completion request. `question` carries the structured metadata the
/// mock backend answers from; HTTP backends ignore it.
pub struct CompletionRequest<'a> {
    pub prompt: &'a Prompt,
    pub params: &'a DecodeParams,
    pub question: Option<&'a DerivedQuestion>,
}

/// Uniform completion contract. Implementations must be safe for concurrent
/// invocation.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelResponse, ClientError>;
}

/// Cache-through completion: return the stored response when the
/// (model, params, prompt) key is present, otherwise call the backend and
/// store the result. Corrupt entries are treated as misses and overwritten.
pub fn cached_complete(
    backend: &dyn Backend,
    request: &CompletionRequest<'_>,
    cache: &ResponseCache,
) -> Result<ModelResponse, ClientError> {
    let key = cache::cache_key(backend.model_id(), request.params, request.prompt);
    match cache.get(&key) {
        Some(mut hit) => {
            hit.cached = true;
            Ok(hit)
        }
        None => {
            let response = backend.complete(request)?;
            cache.put(&key, request.prompt.text(), request.params, &response)?;
            Ok(response)
        }
    }
}
