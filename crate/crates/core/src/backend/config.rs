use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 250 }
    }
}

/// Hard cap on attempts regardless of configuration.
pub const MAX_ATTEMPTS_CAP: u32 = 16;
/// Upper bound on a single backoff sleep.
pub const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Base URL; requests go to `{endpoint_url}/completions`.
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer key. Empty means
    /// no authorization header.
    pub api_key_env: String,
    pub model: String,
    pub top_logprobs_k: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub retry: RetryConfig,
    pub timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            model: "default".into(),
            top_logprobs_k: 20,
            max_tokens: 4096,
            temperature: 0.6,
            max_in_flight: 4,
            retry: RetryConfig::default(),
            timeout_ms: 120_000,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if self.top_logprobs_k == 0 {
            return Err("top_logprobs_k must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be at least 1".into());
        }
        if self.retry.max_attempts == 0 || self.retry.max_attempts > MAX_ATTEMPTS_CAP {
            return Err(format!("retry.max_attempts must be in 1..={MAX_ATTEMPTS_CAP}"));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err("temperature must be a non-negative number".into());
        }
        if self.endpoint_url.is_empty() {
            return Err("endpoint_url is empty".into());
        }
        Ok(())
    }
}
