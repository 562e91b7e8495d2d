//! The fixed prompt suite: one Markdown template per agent role, rendered
//! with named slots, plus strict parsers for each role's structured reply.
//!
//! Templates are compiled once at load time. Loading verifies each template
//! against a pinned SHA-256 manifest and checks that the slots the template
//! body references are exactly the declared required and optional slots.

mod parse;

use std::collections::{BTreeMap, BTreeSet};

use minijinja::Environment;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::AgentRole;

pub use parse::{
    extract_json_object, fenced_blocks, parse_cluster_plan, parse_executor_action, parse_executor_report,
    parse_final_answer, parse_manager, parse_single_code_block, ClusterPlan, ClusterSpec, ExecutorAction,
    ExecutorReport, FencedBlock, FinalAnswer, ManagerDecision, ParseError, ToolRequest, REPORT_SECTIONS,
};
pub(crate) use parse::tool_name_re;

/// Reserved executor tool name that suspends execution and hands the
/// requested capabilities back to the manager.
pub const REQUEST_TOOLS: &str = "request_tools";

const MANIFEST: &str = include_str!("../../prompts/MANIFEST.sha256");

const SOURCES: [(AgentRole, &str, &str); 6] = [
    (AgentRole::Manager, "manager.md", include_str!("../../prompts/manager.md")),
    (AgentRole::ToolDeveloper, "tool_developer.md", include_str!("../../prompts/tool_developer.md")),
    (AgentRole::Executor, "executor.md", include_str!("../../prompts/executor.md")),
    (AgentRole::Integrator, "integrator.md", include_str!("../../prompts/integrator.md")),
    (AgentRole::Aggregator, "aggregator.md", include_str!("../../prompts/aggregator.md")),
    (AgentRole::Merger, "merger.md", include_str!("../../prompts/merger.md")),
];

/// `(required, optional)` slot names per role.
pub fn declared_slots(role: AgentRole) -> (&'static [&'static str], &'static [&'static str]) {
    match role {
        AgentRole::Manager => (&["user_query", "tools"], &["failure_report", "additional_tool_requests"]),
        AgentRole::ToolDeveloper => (&["tool_request_json"], &[]),
        AgentRole::Executor => (&["user_query", "tools"], &["tool_usage_guidance", "context_summary"]),
        AgentRole::Integrator => (&["user_query"], &[]),
        AgentRole::Aggregator => (&["tools"], &[]),
        AgentRole::Merger => (&["tools", "suggest_name"], &[]),
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing required slot `{slot}` for the {role} template")]
    MissingSlot { role: AgentRole, slot: String },
    #[error("slot `{slot}` is not declared by the {role} template")]
    UnknownSlot { role: AgentRole, slot: String },
    #[error("template {file} does not match its pinned checksum")]
    Checksum { file: String },
    #[error("{role} template references slots {found:?} but declares {declared:?}")]
    SlotMismatch { role: AgentRole, declared: Vec<String>, found: Vec<String> },
    #[error("template error: {0}")]
    Template(#[from] minijinja::Error),
}

/// One entry of a tool listing as shown to the manager, executor and aggregator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolSlot {
    pub name: String,
    pub description: String,
    /// Compact JSON text of the input schema.
    pub input_schema: String,
}

impl ToolSlot {
    pub fn new(name: &str, description: &str, input_schema: &serde_json::Value) -> Self {
        Self { name: name.to_string(), description: description.to_string(), input_schema: input_schema.to_string() }
    }
}

/// One member source handed to the merger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergeMember {
    pub idx: usize,
    pub name: String,
    pub code: String,
}

/// Named values for one render call. Empty optional text is treated as absent.
#[derive(Debug, Clone, Default)]
pub struct Slots {
    values: BTreeMap<String, minijinja::Value>,
}

impl Slots {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a text slot; an empty string leaves the slot unset.
    pub fn text(mut self, key: &str, value: impl Into<String>) -> Self {
        let value = value.into();
        if !value.is_empty() {
            self.values.insert(key.to_string(), minijinja::Value::from(value));
        }
        self
    }

    pub fn opt_text(self, key: &str, value: Option<&str>) -> Self {
        match value {
            Some(v) => self.text(key, v),
            None => self,
        }
    }

    /// Sets a collection slot. Lists are always present, possibly empty.
    pub fn list<T: Serialize>(mut self, key: &str, items: &[T]) -> Self {
        self.values.insert(key.to_string(), minijinja::Value::from_serialize(items));
        self
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }
}

/// The compiled prompt suite. Stateless after load.
#[derive(Debug)]
pub struct PromptSuite {
    env: Environment<'static>,
    digest: String,
}

impl PromptSuite {
    pub fn load() -> Result<Self, PromptError> {
        let pinned = parse_manifest(MANIFEST);
        let mut env = Environment::new();
        env.set_trim_blocks(true);
        env.set_lstrip_blocks(true);
        let mut suite_hasher = Sha256::new();
        for (role, file, body) in SOURCES {
            let actual = hex::encode(Sha256::digest(body.as_bytes()));
            if pinned.get(file) != Some(&actual) {
                return Err(PromptError::Checksum { file: file.to_string() });
            }
            suite_hasher.update(actual.as_bytes());
            env.add_template(role.as_str(), body)?;
            let found: BTreeSet<String> = env.get_template(role.as_str())?.undeclared_variables(false).into_iter().collect();
            let (required, optional) = declared_slots(role);
            let declared: BTreeSet<String> = required.iter().chain(optional).map(|s| s.to_string()).collect();
            if found != declared {
                return Err(PromptError::SlotMismatch {
                    role,
                    declared: declared.into_iter().collect(),
                    found: found.into_iter().collect(),
                });
            }
        }
        Ok(Self { env, digest: hex::encode(suite_hasher.finalize()) })
    }

    /// Digest over all template checksums; identifies the suite in traces.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Raw template body for a role.
    pub fn body(role: AgentRole) -> &'static str {
        SOURCES.iter().find(|(r, _, _)| *r == role).map(|(_, _, body)| *body).expect("every role has a template")
    }

    pub fn render(&self, role: AgentRole, slots: &Slots) -> Result<String, PromptError> {
        let (required, optional) = declared_slots(role);
        for slot in required {
            if !slots.contains(slot) {
                return Err(PromptError::MissingSlot { role, slot: slot.to_string() });
            }
        }
        for key in slots.values.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                return Err(PromptError::UnknownSlot { role, slot: key.clone() });
            }
        }
        let template = self.env.get_template(role.as_str())?;
        Ok(template.render(&slots.values)?)
    }
}

fn parse_manifest(text: &str) -> BTreeMap<&str, String> {
    text.lines()
        .filter_map(|line| {
            let (digest, file) = line.split_once(char::is_whitespace)?;
            Some((file.trim(), digest.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn suite() -> PromptSuite {
        PromptSuite::load().expect("suite loads")
    }

    #[test]
    fn manager_renders_with_opening_and_query() {
        let text = suite().render(AgentRole::Manager, &Slots::new().text("user_query", "Q").list::<ToolSlot>("tools", &[])).unwrap();
        assert!(text.contains("You are a Task Orchestrator"));
        assert!(text.contains("## Task\nQ\n"));
        assert!(!text.contains("{{") && !text.contains("{%"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = suite();
        let slots = Slots::new().text("user_query", "Q").list("tools", &[ToolSlot::new("web_search", "Search", &json!({}))]);
        assert_eq!(s.render(AgentRole::Manager, &slots).unwrap(), s.render(AgentRole::Manager, &slots).unwrap());
    }

    #[test]
    fn missing_required_slot_is_named() {
        let err = suite().render(AgentRole::Manager, &Slots::new().list::<ToolSlot>("tools", &[])).unwrap_err();
        assert!(err.to_string().contains("user_query"), "{err}");
    }

    #[test]
    fn unknown_slot_is_rejected() {
        let err = suite().render(AgentRole::Integrator, &Slots::new().text("user_query", "q").text("bogus", "x")).unwrap_err();
        assert!(matches!(err, PromptError::UnknownSlot { .. }));
    }

    #[test]
    fn optional_manager_blocks_follow_slot_presence() {
        let s = suite();
        let base = Slots::new().text("user_query", "Q").list::<ToolSlot>("tools", &[]);
        let plain = s.render(AgentRole::Manager, &base).unwrap();
        assert!(!plain.contains("Failure Report For Previous Execution"));
        assert!(!plain.contains("Tool Request from Executor"));

        let with_failure = s.render(AgentRole::Manager, &base.clone().text("failure_report", "bad name websearch")).unwrap();
        assert!(with_failure.contains("## Failure Report For Previous Execution\nbad name websearch"));
        assert!(!with_failure.contains("## Tool Request from Executor"));

        let with_request = s.render(AgentRole::Manager, &base.clone().text("additional_tool_requests", "need pdf")).unwrap();
        assert!(with_request.contains("## Tool Request from Executor\nneed pdf"));
        assert!(!with_request.contains("## Failure Report"));

        let empty_is_absent = s.render(AgentRole::Manager, &base.text("failure_report", "")).unwrap();
        assert_eq!(empty_is_absent, plain);
    }

    #[test]
    fn tool_listing_is_expanded() {
        let tools = [
            ToolSlot::new("read_text_file", "Read a file", &json!({"type":"object"})),
            ToolSlot::new("web_search", "Search the web", &json!({"type":"object"})),
        ];
        let text = suite().render(AgentRole::Manager, &Slots::new().text("user_query", "Q").list("tools", &tools)).unwrap();
        assert!(text.contains("- **read_text_file**: Read a file. The input args is {\"type\":\"object\"}\n- **web_search**"));
    }

    #[test]
    fn executor_context_blocks_follow_slot_presence() {
        let s = suite();
        let base = Slots::new().text("user_query", "count words").list::<ToolSlot>("tools", &[]);
        let plain = s.render(AgentRole::Executor, &base).unwrap();
        assert!(!plain.contains("Context Summary"));
        assert!(plain.contains("**request_tools**"));
        let resumed = s.render(AgentRole::Executor, &base.text("context_summary", "found 3")).unwrap();
        assert!(resumed.contains("## Context Summary\nfound 3"));
        assert!(resumed.contains("* **Reflection:**"));
    }

    #[test]
    fn merger_uses_suggested_name_and_member_sources() {
        let members = [
            MergeMember { idx: 1, name: "search_web".into(), code: "A = 1".into() },
            MergeMember { idx: 2, name: "web_query_tool".into(), code: "B = 2".into() },
        ];
        let text = suite()
            .render(AgentRole::Merger, &Slots::new().list("tools", &members).text("suggest_name", "search_web"))
            .unwrap();
        assert!(text.contains("The 1th Tool search_web Begin"));
        assert!(text.contains("B = 2"));
        assert!(text.contains("you should use search_web."));
    }

    #[test]
    fn developer_embeds_request_json() {
        let text = suite().render(AgentRole::ToolDeveloper, &Slots::new().text("tool_request_json", "{\"name\":\"x_y\"}")).unwrap();
        assert!(text.ends_with("TOOL_REQUEST (JSON):\n\n{\"name\":\"x_y\"}"));
    }

    #[test]
    fn manifest_covers_every_template() {
        let pinned = parse_manifest(MANIFEST);
        assert_eq!(pinned.len(), SOURCES.len());
        for (_, file, body) in SOURCES {
            assert_eq!(pinned[file], hex::encode(Sha256::digest(body.as_bytes())));
        }
    }
}
