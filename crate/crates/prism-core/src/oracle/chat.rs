//! Live chat-completions HTTP backend.
//!
//! Speaks the common JSON chat protocol: request `{model, messages, temperature}`,
//! answer read from the first choice's message content. Concurrency is gated
//! by a semaphore (default 4 in-flight), transport failures back off
//! exponentially, and unparsable answers are re-sampled up to the retry budget.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{Error, Result};

use super::{response_from_raw, Oracle, OracleQuery, OracleResponse};

/// Connection settings for a chat-completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatCompletionsConfig {
    /// Full completions URL, e.g. `https://api.example.com/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    #[serde(default = "default_credential_env")]
    pub credential_env: String,
    /// Parse/transport retries beyond the first attempt.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Maximum concurrent in-flight requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Base backoff delay in milliseconds, doubled per attempt, capped at 4s.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_credential_env() -> String {
    "PRISM_API_KEY".to_string()
}

fn default_max_retries() -> u32 {
    3
}

fn default_concurrency() -> usize {
    4
}

fn default_backoff_ms() -> u64 {
    250
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    /// Distinguishes self-consistency repeats for the provider without
    /// touching the semantic prompt body.
    #[serde(skip_serializing_if = "Option::is_none")]
    user: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// The live oracle.
pub struct ChatCompletionsOracle {
    config: ChatCompletionsConfig,
    api_key: Option<String>,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl ChatCompletionsOracle {
    pub fn new(config: ChatCompletionsConfig) -> Self {
        let api_key = std::env::var(&config.credential_env).ok();
        let permits = Arc::new(Semaphore::new(config.concurrency.max(1)));
        ChatCompletionsOracle { config, api_key, http: reqwest::Client::new(), permits }
    }

    async fn complete(&self, query: &OracleQuery, nonce: Option<u64>) -> Result<String> {
        let request = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage { role: "user", content: &query.rendered_prompt }],
            temperature: query.meta.temperature,
            user: nonce.map(|n| format!("sc-{n}")),
        };
        let mut builder = self.http.post(&self.config.endpoint).json(&request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| Error::Transport { attempts: 1, message: e.to_string() })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(Error::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {body}"),
            });
        }
        let parsed: ChatResponse = response
            .json()
            .await
            .map_err(|e| Error::Transport { attempts: 1, message: e.to_string() })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Transport { attempts: 1, message: "no choices in response".to_string() })
    }
}

#[async_trait]
impl Oracle for ChatCompletionsOracle {
    async fn evaluate(&self, query: &OracleQuery) -> Result<OracleResponse> {
        query.validate()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| Error::Transport { attempts: 0, message: "semaphore closed".to_string() })?;

        let budget = self.config.max_retries + 1;
        let mut last_raw = String::new();
        let mut last_err: Option<Error> = None;
        for attempt in 1..=budget {
            if attempt > 1 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(4));
                tokio::time::sleep(Duration::from_millis(delay.min(4_000))).await;
            }
            // Parse retries re-sample: a fresh nonce makes the provider treat
            // the repeat as a distinct request.
            let retry_nonce = match (query.meta.nonce, attempt) {
                (base, 1) => base,
                (Some(base), n) => Some(base.wrapping_add(u64::from(n) << 32)),
                (None, n) => Some(u64::from(n) << 32),
            };
            match self.complete(query, retry_nonce).await {
                Ok(raw) => {
                    last_raw = raw.clone();
                    match response_from_raw(query, raw, false, attempt) {
                        Ok(response) => return Ok(response),
                        Err(e) => last_err = Some(e),
                    }
                }
                Err(Error::Transport { message, .. }) => {
                    last_err = Some(Error::Transport { attempts: attempt, message });
                }
                Err(other) => return Err(other),
            }
        }
        match last_err {
            Some(Error::Parse { message, .. }) => Err(Error::Query {
                context: format!(
                    "task {} instance {} after {budget} attempts",
                    query.meta.task_id, query.meta.instance_id
                ),
                message: format!("{message}; final raw text: {last_raw:?}"),
            }),
            Some(e) => Err(e),
            None => Err(Error::Transport { attempts: budget, message: "exhausted retries".to_string() }),
        }
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }
}
