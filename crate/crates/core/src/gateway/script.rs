use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, AgentRole, ChatExchange, ChatProvider, CompletionResult, GatewayError};

/// How a script entry is matched against an incoming exchange.
///
/// The digest of the rendered messages is tried first; the per-role call
/// index is the fallback so hand-written scripts survive prompt edits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchKey {
    Digest { digest: String },
    Sequence { agent_role: AgentRole, sequence_index: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub key: MatchKey,
    pub response_text: String,
}

impl ScriptEntry {
    pub fn by_digest(digest: impl Into<String>, response: impl Into<String>) -> Self {
        Self { key: MatchKey::Digest { digest: digest.into() }, response_text: response.into() }
    }

    pub fn by_sequence(role: AgentRole, index: u64, response: impl Into<String>) -> Self {
        Self {
            key: MatchKey::Sequence { agent_role: role, sequence_index: index },
            response_text: response.into(),
        }
    }
}

#[derive(Debug, Default)]
struct ReplayCursor {
    per_role: BTreeMap<AgentRole, u64>,
    consumed: Vec<MatchKey>,
}

/// Replays a fixed script. Tokens are estimated from text length.
#[derive(Debug)]
pub struct ScriptedProvider {
    id: String,
    entries: HashMap<MatchKey, String>,
    cursor: Mutex<ReplayCursor>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        let mut map = HashMap::with_capacity(entries.len());
        for entry in entries {
            if map.insert(entry.key.clone(), entry.response_text).is_some() {
                return Err(GatewayError::Script(format!("duplicate match key {:?}", entry.key)));
            }
        }
        Ok(Self { id: "scripted".to_string(), entries: map, cursor: Mutex::default() })
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read script {}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keys consumed so far, in call order.
    pub fn consumed(&self) -> Vec<MatchKey> {
        self.cursor.lock().expect("script cursor poisoned").consumed.clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        if exchange.messages.is_empty() {
            return Err(GatewayError::EmptyExchange);
        }
        let digest = exchange.digest();
        let mut cursor = self.cursor.lock().expect("script cursor poisoned");
        let counter = cursor.per_role.entry(exchange.agent_role).or_insert(0);
        let index = *counter;
        *counter += 1;

        let by_digest = MatchKey::Digest { digest: digest.clone() };
        let by_sequence = MatchKey::Sequence { agent_role: exchange.agent_role, sequence_index: index };
        let (key, text) = if let Some(text) = self.entries.get(&by_digest) {
            (by_digest, text)
        } else if let Some(text) = self.entries.get(&by_sequence) {
            (by_sequence, text)
        } else {
            return Err(GatewayError::ScriptExhausted { role: exchange.agent_role, index, digest });
        };
        cursor.consumed.push(key);

        let prompt: String = exchange.messages.iter().map(|m| m.content.as_str()).collect();
        Ok(CompletionResult {
            text: text.clone(),
            prompt_tokens: estimate_tokens(&prompt),
            completion_tokens: estimate_tokens(text),
            provider_id: self.id.clone(),
        })
    }
}

/// Wraps another provider and records every answer keyed by exchange digest,
/// producing a script that [`ScriptedProvider`] can replay offline.
pub struct RecordingProvider<P> {
    inner: P,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, recorded: Mutex::new(BTreeMap::new()) }
    }

    /// Entries sorted by digest. A digest seen twice keeps its first answer.
    pub fn script(&self) -> Vec<ScriptEntry> {
        self.recorded
            .lock()
            .expect("recording lock poisoned")
            .iter()
            .map(|(d, r)| ScriptEntry::by_digest(d.clone(), r.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.script()).map_err(std::io::Error::other)?;
        fs::write(path, text)
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        let result = self.inner.complete(exchange)?;
        let mut recorded = self.recorded.lock().expect("recording lock poisoned");
        let slot = recorded.entry(exchange.digest()).or_insert_with(|| result.text.clone());
        if *slot != result.text {
            log::warn!("non-deterministic answer for digest {}; keeping the first", exchange.digest());
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn exchange(role: AgentRole, text: &str) -> ChatExchange {
        ChatExchange::new(role, vec![ChatMessage::user(text)]).unwrap()
    }

    #[test]
    fn digest_entry_wins_and_tokens_are_estimated() {
        let ex = exchange(AgentRole::Manager, "rendered prompt D");
        let provider = ScriptedProvider::new(vec![
            ScriptEntry::by_digest(ex.digest(), "answer!!"),
            ScriptEntry::by_sequence(AgentRole::Manager, 0, "positional"),
        ])
        .unwrap();
        let out = provider.complete(&ex).unwrap();
        assert_eq!(out.text, "answer!!");
        assert_eq!(out.completion_tokens, 2);
        assert_eq!(out.prompt_tokens, estimate_tokens("rendered prompt D"));
    }

    #[test]
    fn sequence_fallback_counts_per_role() {
        let provider = ScriptedProvider::new(vec![
            ScriptEntry::by_sequence(AgentRole::Executor, 0, "first"),
            ScriptEntry::by_sequence(AgentRole::Executor, 1, "second"),
            ScriptEntry::by_sequence(AgentRole::Manager, 0, "plan"),
        ])
        .unwrap();
        assert_eq!(provider.complete(&exchange(AgentRole::Executor, "a")).unwrap().text, "first");
        assert_eq!(provider.complete(&exchange(AgentRole::Manager, "b")).unwrap().text, "plan");
        assert_eq!(provider.complete(&exchange(AgentRole::Executor, "c")).unwrap().text, "second");
        let err = provider.complete(&exchange(AgentRole::Executor, "d")).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { role: AgentRole::Executor, index: 2, .. }));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = ScriptedProvider::new(vec![
            ScriptEntry::by_digest("aa", "x"),
            ScriptEntry::by_digest("aa", "y"),
        ])
        .unwrap_err();
        assert!(matches!(err, GatewayError::Script(_)));
    }

    #[test]
    fn script_file_format_accepts_both_key_kinds() {
        let json = r#"[
            {"digest": "abc", "response_text": "one"},
            {"agent_role": "integrator", "sequence_index": 3, "response_text": "two"}
        ]"#;
        let entries: Vec<ScriptEntry> = serde_json::from_str(json).unwrap();
        assert_eq!(entries[0], ScriptEntry::by_digest("abc", "one"));
        assert_eq!(entries[1], ScriptEntry::by_sequence(AgentRole::Integrator, 3, "two"));
        let back: Vec<ScriptEntry> = serde_json::from_str(&serde_json::to_string(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn recording_then_replay_is_identical() {
        struct Upper;
        impl ChatProvider for Upper {
            fn id(&self) -> &str {
                "upper"
            }
            fn complete(&self, ex: &ChatExchange) -> Result<CompletionResult, GatewayError> {
                Ok(CompletionResult {
                    text: ex.messages[0].content.to_uppercase(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    provider_id: "upper".into(),
                })
            }
        }
        let recorder = RecordingProvider::new(Upper);
        let prompts = ["alpha", "beta", "alpha"];
        let live: Vec<String> = prompts
            .iter()
            .map(|p| recorder.complete(&exchange(AgentRole::Merger, p)).unwrap().text)
            .collect();
        let replay = ScriptedProvider::new(recorder.script()).unwrap();
        assert_eq!(replay.len(), 2);
        let replayed: Vec<String> = prompts
            .iter()
            .map(|p| replay.complete(&exchange(AgentRole::Merger, p)).unwrap().text)
            .collect();
        assert_eq!(live, replayed);
        assert_eq!(replay.consumed().len(), 3);
    }
}
