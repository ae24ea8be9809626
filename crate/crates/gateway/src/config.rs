use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::GatewayError;

pub const ENV_API_KEY: &str = "DDC_API_KEY";
pub const ENV_BASE_URL: &str = "DDC_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiMode {
    /// `POST {base_url}/completions` with a raw prompt.
    Completions,
    /// `POST {base_url}/chat/completions` with the templated prompt as the
    /// user message.
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub retries: u32,
    pub backoff_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_ms: 500,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms as f64 * self.backoff_factor.powi(attempt as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Endpoint settings. The API key never comes from a file.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL including the version prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub api: ApiMode,
    pub temperature: f64,
    pub top_p: f64,
    pub top_logprobs: usize,
    pub max_tokens: usize,
    /// Idle timeout on every read, in seconds.
    pub request_timeout_secs: u64,
    pub connect_timeout_secs: u64,
    pub retry: RetryPolicy,
    /// `{prompt}` is replaced by the query prompt.
    pub prompt_template: String,
    /// System message for chat mode.
    pub system_prompt: Option<String>,
    /// When set, path `i` requests sampling seed `seed + i`.
    pub seed: Option<u64>,
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("api", &self.api)
            .field("temperature", &self.temperature)
            .field("top_p", &self.top_p)
            .field("top_logprobs", &self.top_logprobs)
            .field("max_tokens", &self.max_tokens)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            api: ApiMode::Completions,
            temperature: 0.6,
            top_p: 0.95,
            top_logprobs: 20,
            max_tokens: 32_768,
            request_timeout_secs: 600,
            connect_timeout_secs: 10,
            retry: RetryPolicy::default(),
            prompt_template: "{prompt}".into(),
            system_prompt: None,
            seed: None,
        }
    }
}

impl EndpointConfig {
    /// Fills the API key and, when present, the base URL from the
    /// environment.
    pub fn with_env(mut self) -> Self {
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.top_logprobs < 1 {
            return bad("top_logprobs must be >= 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be >= 1".into());
        }
        if !self.prompt_template.contains("{prompt}") {
            return bad("prompt_template must contain {prompt}".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad(format!("base_url must be http(s), got {:?}", self.base_url));
        }
        if !(self.retry.backoff_factor >= 1.0 && self.retry.backoff_factor.is_finite()) {
            return bad("retry.backoff_factor must be >= 1".into());
        }
        Ok(())
    }

    pub fn render_prompt(&self, prompt: &str) -> String {
        self.prompt_template.replace("{prompt}", prompt)
    }

    pub fn endpoint_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        match self.api {
            ApiMode::Completions => format!("{base}/completions"),
            ApiMode::Chat => format!("{base}/chat/completions"),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    pub fn connect_timeout(&self) -> Duration {
        Duration::from_secs(self.connect_timeout_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let cfg = EndpointConfig::default();
        assert_eq!(cfg.temperature, 0.6);
        assert_eq!(cfg.top_p, 0.95);
        assert!(cfg.validate().is_ok());
        for bad in [
            EndpointConfig {
                top_logprobs: 0,
                ..cfg.clone()
            },
            EndpointConfig {
                temperature: -0.1,
                ..cfg.clone()
            },
            EndpointConfig {
                prompt_template: "no placeholder".into(),
                ..cfg.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn key_is_never_serialized() {
        let cfg = EndpointConfig {
            api_key: Some("sk-secret".into()),
            ..EndpointConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(!json.contains("sk-secret"));
        assert!(!format!("{cfg:?}").contains("sk-secret"));
    }

    #[test]
    fn urls_and_backoff() {
        let mut cfg = EndpointConfig {
            base_url: "http://h:1/v1/".into(),
            ..EndpointConfig::default()
        };
        assert_eq!(cfg.endpoint_url(), "http://h:1/v1/completions");
        cfg.api = ApiMode::Chat;
        assert_eq!(cfg.endpoint_url(), "http://h:1/v1/chat/completions");
        let r = RetryPolicy::default();
        assert_eq!(r.delay(0), Duration::from_millis(500));
        assert_eq!(r.delay(2), Duration::from_millis(2000));
    }
}
