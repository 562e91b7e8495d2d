use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, ChatExchange, ChatProvider, CompletionResult, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`. `/chat/completions` is appended.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

fn default_timeout_secs() -> u64 {
    120
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key_env: api_key_env.into(),
            max_attempts: default_attempts(),
            initial_backoff_ms: default_backoff_ms(),
            request_timeout_secs: default_timeout_secs(),
        }
    }
}

/// Client for any endpoint speaking the OpenAI chat-completions format.
pub struct OpenAiProvider {
    config: OpenAiConfig,
    api_key: String,
    url: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiProvider").field("url", &self.url).finish_non_exhaustive()
    }
}

impl OpenAiProvider {
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::Config(format!("environment variable {} is not set", config.api_key_env))
        })?;
        if config.max_attempts == 0 {
            return Err(GatewayError::Config("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        Ok(Self { config, api_key, url, client })
    }

    fn request_body(exchange: &ChatExchange) -> Value {
        let messages: Vec<Value> = exchange
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": exchange.model_id,
            "messages": messages,
            "temperature": exchange.temperature,
        });
        if !exchange.functions.is_empty() {
            let tools: Vec<Value> = exchange
                .functions
                .iter()
                .map(|f| {
                    json!({"type": "function", "function": {
                        "name": f.name, "description": f.description, "parameters": f.parameters
                    }})
                })
                .collect();
            body["tools"] = Value::Array(tools);
        }
        body
    }

    fn send_once(&self, body: &Value) -> Result<Value, Attempt> {
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retryable(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::Http { status: status.as_u16(), body: truncate(&text, 2000) }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(GatewayError::Decode(e.to_string())))
    }
}

enum Attempt {
    Retryable(String),
    Fatal(GatewayError),
}

fn truncate(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((idx, _)) => format!("{}...", &text[..idx]),
        None => text.to_string(),
    }
}

/// Native tool calls are folded into the fenced action-block form so the
/// executor sees one format regardless of provider support.
fn normalize_reply(response: &Value) -> Result<String, GatewayError> {
    let message = response
        .pointer("/choices/0/message")
        .ok_or_else(|| GatewayError::Decode("missing choices[0].message".into()))?;
    let mut text = message.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    if let Some(call) = message.pointer("/tool_calls/0/function") {
        let name = call.get("name").and_then(Value::as_str).unwrap_or_default();
        let arguments = match call.get("arguments") {
            Some(Value::String(raw)) => serde_json::from_str(raw).unwrap_or(Value::String(raw.clone())),
            Some(other) => other.clone(),
            None => json!({}),
        };
        let action = json!({"tool": name, "input": arguments});
        if !text.is_empty() {
            text.push_str("\n\n");
        }
        text.push_str(&format!("```json\n{action}\n```"));
    }
    if text.is_empty() {
        return Err(GatewayError::Decode("empty completion".into()));
    }
    Ok(text)
}

impl ChatProvider for OpenAiProvider {
    fn id(&self) -> &str {
        "openai-compatible"
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        let body = Self::request_body(exchange);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.send_once(&body) {
                Ok(response) => {
                    let text = normalize_reply(&response)?;
                    let usage = response.get("usage");
                    let reported = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64);
                    let prompt_estimate = exchange
                        .messages
                        .iter()
                        .map(|m| estimate_tokens(&m.content))
                        .sum::<u64>();
                    return Ok(CompletionResult {
                        prompt_tokens: reported("prompt_tokens").unwrap_or(prompt_estimate),
                        completion_tokens: reported("completion_tokens").unwrap_or_else(|| estimate_tokens(&text)),
                        text,
                        provider_id: self.id().to_string(),
                    });
                }
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retryable(message)) => {
                    log::warn!("chat completion attempt {attempt} failed: {message}");
                    last_error = message;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::Transport { attempts: self.config.max_attempts, message: last_error })
    }
}
