//! Client for an OpenAI-compatible text-completions endpoint.

use std::time::Duration;

use futures::stream::{self, StreamExt};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalClientConfig {
    /// Full URL of the completions route, e.g. `http://host:8000/v1/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding a bearer token; no auth header when unset.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay; doubled after each failed attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_max_tokens() -> u32 {
    4
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    8
}

fn default_backoff() -> u64 {
    250
}

impl ExternalClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: None,
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(Error::Config("external temperature must be 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

/// Outcome of one attempt: whether trying again could help.
enum Attempt {
    Retry(String),
    Fatal(Error),
}

pub struct ExternalClient {
    config: ExternalClientConfig,
    http: reqwest::Client,
    token: Option<String>,
}

impl ExternalClient {
    pub fn new(config: ExternalClientConfig) -> Result<Self> {
        config.validate()?;
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable `{var}` with the API token is not set"))
            })?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { config, http, token })
    }

    pub fn config(&self) -> &ExternalClientConfig {
        &self.config
    }

    async fn attempt(&self, prompt: &str) -> Result<String, Attempt> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": 0,
        });
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Protocol(format!("HTTP {status}"))));
        }
        let bytes = resp.bytes().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let parsed: CompletionResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Attempt::Fatal(Error::Protocol("response has no choices".into())))
    }

    /// One completion, retrying transient failures with exponential backoff.
    pub async fn complete(&self, prompt: &str) -> Result<String> {
        let attempts = self.config.max_retries + 1;
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(prompt).await {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!("completion attempt {} of {attempts} failed: {msg}", i + 1);
                    last = msg;
                    if i + 1 < attempts {
                        tokio::time::sleep(delay).await;
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::RetriesExhausted {
            attempts: attempts as usize,
            last,
        })
    }

    /// Complete every prompt with at most `max_in_flight` requests open.
    /// Results come back in prompt order.
    pub async fn complete_all(&self, prompts: &[String]) -> Vec<Result<String>> {
        let mut out: Vec<(usize, Result<String>)> = stream::iter(prompts.iter().enumerate())
            .map(|(i, p)| async move { (i, self.complete(p).await) })
            .buffer_unordered(self.config.max_in_flight)
            .collect()
            .await;
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    }

    /// Blocking wrapper around [`Self::complete_all`] for synchronous callers.
    pub fn complete_all_blocking(&self, prompts: &[String]) -> Result<Vec<Result<String>>> {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
        Ok(rt.block_on(self.complete_all(prompts)))
    }
}
