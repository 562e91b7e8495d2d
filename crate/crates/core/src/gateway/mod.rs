//! Chat-completion gateway.
//!
//! Every agent role talks to the model through [`Gateway::complete`]. The
//! gateway routes the exchange to a model id, forwards it to a
//! [`ChatProvider`] and accumulates token usage per role. Two providers ship
//! with the crate: [`OpenAiProvider`] for live OpenAI-compatible endpoints and
//! [`ScriptedProvider`] for offline, deterministic replay.

mod openai;
mod script;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use openai::{OpenAiConfig, OpenAiProvider};
pub use script::{MatchKey, RecordingProvider, ScriptEntry, ScriptedProvider};

/// Sampling temperature used for every call unless overridden.
pub const DEFAULT_TEMPERATURE: f32 = 0.7;

/// The six agent roles that issue model calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Manager,
    ToolDeveloper,
    Executor,
    Integrator,
    Aggregator,
    Merger,
}

impl AgentRole {
    pub const ALL: [AgentRole; 6] = [
        AgentRole::Manager,
        AgentRole::ToolDeveloper,
        AgentRole::Executor,
        AgentRole::Integrator,
        AgentRole::Aggregator,
        AgentRole::Merger,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentRole::Manager => "manager",
            AgentRole::ToolDeveloper => "tool_developer",
            AgentRole::Executor => "executor",
            AgentRole::Integrator => "integrator",
            AgentRole::Aggregator => "aggregator",
            AgentRole::Merger => "merger",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl MessageRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: MessageRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: MessageRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: MessageRole::Assistant, content: content.into() }
    }
}

/// A function the provider may call natively instead of emitting a fenced
/// action block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

/// One request to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    /// Filled in by gateway routing when left empty.
    pub model_id: String,
    pub agent_role: AgentRole,
    pub functions: Vec<FunctionSpec>,
}

impl ChatExchange {
    /// The first message must carry the rendered prompt.
    pub fn new(agent_role: AgentRole, messages: Vec<ChatMessage>) -> Result<Self, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyExchange);
        }
        Ok(Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            model_id: String::new(),
            agent_role,
            functions: Vec::new(),
        })
    }

    pub fn with_functions(mut self, functions: Vec<FunctionSpec>) -> Self {
        self.functions = functions;
        self
    }

    /// Hex SHA-256 over the ordered messages; the primary key for scripted replay.
    pub fn digest(&self) -> String {
        messages_digest(&self.messages)
    }

    /// Total characters across all message bodies.
    pub fn prompt_text_len(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

pub fn messages_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update(b"\n");
        hasher.update(m.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider_id: String,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("chat exchange has no messages")]
    EmptyExchange,
    #[error("temperature {0} outside [0, 2]")]
    InvalidTemperature(f32),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("script exhausted: no entry for {role} call #{index} (digest {digest})")]
    ScriptExhausted { role: AgentRole, index: u64, digest: String },
    #[error("script error: {0}")]
    Script(String),
}

/// A backend able to answer a chat exchange.
pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError>;
}

/// `ceil(chars / 4)`; used wherever a provider reports no real usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Token counters. Merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn from_result(result: &CompletionResult) -> Self {
        Self { calls: 1, prompt_tokens: result.prompt_tokens, completion_tokens: result.completion_tokens }
    }

    pub fn merge(&mut self, other: &Usage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Model selection per role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRouting {
    pub default_model: String,
    #[serde(default)]
    pub per_role: BTreeMap<AgentRole, String>,
}

impl ModelRouting {
    pub fn model_for(&self, role: AgentRole) -> &str {
        self.per_role.get(&role).map(String::as_str).unwrap_or(&self.default_model)
    }
}

pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    routing: ModelRouting,
    temperature: f32,
    native_functions: bool,
    usage: Mutex<BTreeMap<AgentRole, Usage>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.id())
            .field("routing", &self.routing)
            .field("temperature", &self.temperature)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            provider,
            routing: ModelRouting::default(),
            temperature: DEFAULT_TEMPERATURE,
            native_functions: false,
            usage: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_routing(mut self, routing: ModelRouting) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Result<Self, GatewayError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(GatewayError::InvalidTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Offer bound tools to the provider as native function specs.
    pub fn with_native_functions(mut self, enabled: bool) -> Self {
        self.native_functions = enabled;
        self
    }

    pub fn native_functions(&self) -> bool {
        self.native_functions
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn complete(&self, mut exchange: ChatExchange) -> Result<CompletionResult, GatewayError> {
        if exchange.messages.is_empty() {
            return Err(GatewayError::EmptyExchange);
        }
        if exchange.model_id.is_empty() {
            exchange.model_id = self.routing.model_for(exchange.agent_role).to_string();
        }
        exchange.temperature = self.temperature;
        if !self.native_functions {
            exchange.functions.clear();
        }
        let result = self.provider.complete(&exchange)?;
        self.usage
            .lock()
            .expect("usage lock poisoned")
            .entry(exchange.agent_role)
            .or_default()
            .merge(&Usage::from_result(&result));
        Ok(result)
    }

    pub fn usage_by_role(&self) -> BTreeMap<AgentRole, Usage> {
        self.usage.lock().expect("usage lock poisoned").clone()
    }

    pub fn total_usage(&self) -> Usage {
        let mut total = Usage::default();
        for usage in self.usage.lock().expect("usage lock poisoned").values() {
            total.merge(usage);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_estimate_is_ceil_of_quarter_chars() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
        // characters, not bytes
        assert_eq!(estimate_tokens("ééééé"), 2);
    }

    #[test]
    fn empty_exchange_is_rejected() {
        assert!(matches!(ChatExchange::new(AgentRole::Manager, vec![]), Err(GatewayError::EmptyExchange)));
    }

    #[test]
    fn exchange_defaults_temperature() {
        let ex = ChatExchange::new(AgentRole::Executor, vec![ChatMessage::user("x")]).unwrap();
        assert_eq!(ex.temperature, 0.7);
    }

    #[test]
    fn digest_depends_on_role_and_order() {
        let a = messages_digest(&[ChatMessage::user("a"), ChatMessage::assistant("b")]);
        let b = messages_digest(&[ChatMessage::assistant("b"), ChatMessage::user("a")]);
        let c = messages_digest(&[ChatMessage::system("a"), ChatMessage::assistant("b")]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, messages_digest(&[ChatMessage::user("a"), ChatMessage::assistant("b")]));
    }

    #[test]
    fn usage_merge_is_order_independent() {
        let parts = [
            Usage { calls: 1, prompt_tokens: 10, completion_tokens: 3 },
            Usage { calls: 2, prompt_tokens: 7, completion_tokens: 9 },
            Usage { calls: 1, prompt_tokens: 0, completion_tokens: 1 },
        ];
        let mut forward = Usage::default();
        parts.iter().for_each(|u| forward.merge(u));
        let mut backward = Usage::default();
        parts.iter().rev().for_each(|u| backward.merge(u));
        assert_eq!(forward, backward);
        assert_eq!(forward.total_tokens(), 30);
    }

    #[test]
    fn routing_falls_back_to_default_model() {
        let mut routing = ModelRouting { default_model: "base".into(), per_role: BTreeMap::new() };
        routing.per_role.insert(AgentRole::ToolDeveloper, "coder".into());
        assert_eq!(routing.model_for(AgentRole::ToolDeveloper), "coder");
        assert_eq!(routing.model_for(AgentRole::Manager), "base");
    }
}
