//! Run configuration: every knob a pipeline run depends on, serializable so
//! output files can embed the digest of the exact configuration that
//! produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transforms::{PermutationBudget, Profile, TokenPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse {0}: {1}")]
    BadValue(&'static str, String),
    #[error("config file {0}: {1}")]
    File(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Serializable run configuration. Budget and token policy use their CLI
/// spellings so the TOML file and the flags read identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub model: String,
    pub base_url: Option<String>,
    pub mock_policy: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub perm_budget: Option<String>,
    pub token_policy: String,
    pub profile: Profile,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub few_shot: usize,
    pub demo_pool: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    pub top_logprobs: u8,
    pub max_retries: u32,
    pub requests_per_second: Option<f64>,
    pub system_prompt: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendKind::Mock,
            model: "mock".to_string(),
            base_url: None,
            mock_policy: None,
            template_dir: None,
            perm_budget: None,
            token_policy: "gibberish:6".to_string(),
            profile: Profile::Full,
            seed: 0,
            cache_dir: None,
            concurrency: 4,
            few_shot: 0,
            demo_pool: None,
            temperature: 0.0,
            max_tokens: 16,
            logprobs: false,
            top_logprobs: 0,
            max_retries: 3,
            requests_per_second: None,
            system_prompt: None,
        }
    }
}

impl RunConfig {
    /// Content digest embedded in every output file this run produces.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(hasher.finalize())[..16].to_string()
    }

    /// Budget for an item with `n` options: the configured one, or the
    /// default rule (exhaustive when n <= 4, rotations otherwise).
    pub fn budget_for(&self, n_options: usize) -> Result<PermutationBudget, ConfigError> {
        match &self.perm_budget {
            None => Ok(PermutationBudget::default_for(n_options)),
            Some(spec) => parse_budget(spec, self.seed),
        }
    }

    pub fn token_policy(&self) -> Result<TokenPolicy, ConfigError> {
        parse_token_policy(&self.token_policy, self.seed)
    }
}

/// Parse `all | cyclic | sample:K` budget spellings.
pub fn parse_budget(spec: &str, seed: u64) -> Result<PermutationBudget, ConfigError> {
    match spec {
        "all" => Ok(PermutationBudget::All),
        "cyclic" => Ok(PermutationBudget::Cyclic),
        other => {
            let k = other
                .strip_prefix("sample:")
                .and_then(|k| k.parse::<usize>().ok())
                .ok_or_else(|| {
                    ConfigError::BadValue("perm-budget", format!("{other:?} (want all | cyclic | sample:K)"))
                })?;
            Ok(PermutationBudget::Sampled { k, seed })
        }
    }
}

/// Parse `fixed:STR | gibberish:LEN` token-policy spellings.
pub fn parse_token_policy(spec: &str, seed: u64) -> Result<TokenPolicy, ConfigError> {
    if let Some(text) = spec.strip_prefix("fixed:") {
        return TokenPolicy::fixed(text)
            .map_err(|e| ConfigError::BadValue("token-policy", e.to_string()));
    }
    if let Some(len) = spec.strip_prefix("gibberish:") {
        let length: usize = len.parse().map_err(|_| {
            ConfigError::BadValue("token-policy", format!("bad gibberish length {len:?}"))
        })?;
        return TokenPolicy::gibberish(length, seed)
            .map_err(|e| ConfigError::BadValue("token-policy", e.to_string()));
    }
    Err(ConfigError::BadValue(
        "token-policy",
        format!("{spec:?} (want fixed:STR | gibberish:LEN)"),
    ))
}

/// Apply a TOML config file over an already-built config. File values win,
/// per the CLI contract (`--config` overrides flags).
pub fn apply_config_file(config: &mut RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::File(path.display().to_string(), e.to_string()))?;
    let table: BTreeMap<String, toml::Value> = toml::from_str(&text)
        .map_err(|e| ConfigError::File(path.display().to_string(), e.to_string()))?;
    let bad = |key: &'static str, value: &toml::Value| {
        ConfigError::BadValue(key, value.to_string())
    };
    for (key, value) in table {
        match key.as_str() {
            "backend" => {
                config.backend = match value.as_str() {
                    Some("mock") => BackendKind::Mock,
                    Some("http") => BackendKind::Http,
                    _ => return Err(bad("backend", &value)),
                }
            }
            "model" => config.model = value.as_str().ok_or(bad("model", &value))?.to_string(),
            "base_url" => {
                config.base_url = Some(value.as_str().ok_or(bad("base_url", &value))?.to_string())
            }
            "mock_policy" => {
                config.mock_policy =
                    Some(PathBuf::from(value.as_str().ok_or(bad("mock_policy", &value))?))
            }
            "template_dir" => {
                config.template_dir =
                    Some(PathBuf::from(value.as_str().ok_or(bad("template_dir", &value))?))
            }
            "perm_budget" => {
                config.perm_budget =
                    Some(value.as_str().ok_or(bad("perm_budget", &value))?.to_string())
            }
            "token_policy" => {
                config.token_policy =
                    value.as_str().ok_or(bad("token_policy", &value))?.to_string()
            }
            "profile" => {
                config.profile = match value.as_str() {
                    Some("full") => Profile::Full,
                    Some("hard") => Profile::Hard,
                    Some("x1") => Profile::X1,
                    _ => return Err(bad("profile", &value)),
                }
            }
            "seed" => config.seed = value.as_integer().ok_or(bad("seed", &value))? as u64,
            "cache_dir" => {
                config.cache_dir =
                    Some(PathBuf::from(value.as_str().ok_or(bad("cache_dir", &value))?))
            }
            "concurrency" => {
                config.concurrency =
                    value.as_integer().ok_or(bad("concurrency", &value))?.max(1) as usize
            }
            "few_shot" => {
                config.few_shot = value.as_integer().ok_or(bad("few_shot", &value))? as usize
            }
            "demo_pool" => {
                config.demo_pool =
                    Some(PathBuf::from(value.as_str().ok_or(bad("demo_pool", &value))?))
            }
            "temperature" => {
                config.temperature = value
                    .as_float()
                    .or_else(|| value.as_integer().map(|i| i as f64))
                    .ok_or(bad("temperature", &value))?
            }
            "max_tokens" => {
                config.max_tokens = value.as_integer().ok_or(bad("max_tokens", &value))? as u32
            }
            "logprobs" => config.logprobs = value.as_bool().ok_or(bad("logprobs", &value))?,
            "top_logprobs" => {
                config.top_logprobs =
                    value.as_integer().ok_or(bad("top_logprobs", &value))? as u8
            }
            "max_retries" => {
                config.max_retries =
                    value.as_integer().ok_or(bad("max_retries", &value))? as u32
            }
            "requests_per_second" => {
                config.requests_per_second = Some(
                    value
                        .as_float()
                        .or_else(|| value.as_integer().map(|i| i as f64))
                        .ok_or(bad("requests_per_second", &value))?,
                )
            }
            "system_prompt" => {
                config.system_prompt =
                    Some(value.as_str().ok_or(bad("system_prompt", &value))?.to_string())
            }
            _ => {
                return Err(ConfigError::File(
                    path.display().to_string(),
                    format!("unknown key {key:?}"),
                ))
            }
        }
    }
    Ok(())
}
