//! Reply parsers. Every parser is strict about structure and never fills in
//! content that is absent from the reply.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::check_object_schema;

/// A reply that failed to parse. The reply travels with the error so callers
/// can feed it back as failure context.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct ParseError {
    pub reason: String,
    pub reply: String,
}

impl ParseError {
    fn new(reason: impl Into<String>, reply: &str) -> Self {
        Self { reason: reason.into(), reply: reply.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    /// Info string after the opening fence, lowercased and trimmed.
    pub lang: String,
    pub body: String,
}

/// Fenced code blocks in order of appearance. An unterminated final block
/// runs to the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, usize, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match open.as_mut() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    let width = 3 + info.chars().take_while(|c| *c == '`').count();
                    let info = info.trim_start_matches('`').trim().to_ascii_lowercase();
                    open = Some((info, width, Vec::new()));
                }
            }
            Some((_, width, lines)) => {
                let t = trimmed.trim_end();
                if t.len() >= *width && t.chars().all(|c| c == '`') {
                    let (lang, _, lines) = open.take().expect("block is open");
                    blocks.push(FencedBlock { lang, body: lines.join("\n") });
                } else {
                    lines.push(line);
                }
            }
        }
    }
    if let Some((lang, _, lines)) = open {
        blocks.push(FencedBlock { lang, body: lines.join("\n") });
    }
    blocks
}

/// The single JSON object in a reply: exactly one `json` (or unlabeled)
/// fenced block, or else a bare object spanning the outermost braces.
pub fn extract_json_object(reply: &str) -> Result<Map<String, Value>, ParseError> {
    let candidates: Vec<FencedBlock> =
        fenced_blocks(reply).into_iter().filter(|b| b.lang.is_empty() || b.lang == "json").collect();
    let text = match candidates.len() {
        0 => match (reply.find('{'), reply.rfind('}')) {
            (Some(start), Some(end)) if start < end => reply[start..=end].to_string(),
            _ => return Err(ParseError::new("no JSON object found", reply)),
        },
        1 => candidates[0].body.clone(),
        n => return Err(ParseError::new(format!("expected one JSON block, found {n}"), reply)),
    };
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ParseError::new("JSON value is not an object", reply)),
        Err(e) => Err(ParseError::new(format!("malformed JSON: {e}"), reply)),
    }
}

fn required_key<'a>(map: &'a Map<String, Value>, key: &str, reply: &str) -> Result<&'a Value, ParseError> {
    map.get(key).ok_or_else(|| ParseError::new(format!("missing required key `{key}`"), reply))
}

fn string_list(value: &Value, key: &str, reply: &str) -> Result<Vec<String>, ParseError> {
    let items = value.as_array().ok_or_else(|| ParseError::new(format!("`{key}` must be a list"), reply))?;
    items
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ParseError::new(format!("`{key}` must contain only strings"), reply))
        })
        .collect()
}

/// A request for a new tool, as issued by the manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub name: String,
    pub description: String,
    pub input_schema: Value,
    pub output_schema: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependencies: Vec<String>,
}

impl ToolRequest {
    /// Checks the verb_target naming rule and schema shapes.
    pub fn check(&self) -> Result<(), String> {
        if !tool_name_re().is_match(&self.name) {
            return Err(format!("tool name `{}` is not snake_case verb_target", self.name));
        }
        check_object_schema(&self.input_schema).map_err(|e| format!("{}: input_schema {e}", self.name))?;
        check_object_schema(&self.output_schema).map_err(|e| format!("{}: output_schema {e}", self.name))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerDecision {
    pub required_tool_names: Vec<String>,
    pub tool_usage_guidance: String,
    pub tool_requests: Vec<ToolRequest>,
}

pub fn parse_manager(reply: &str) -> Result<ManagerDecision, ParseError> {
    let map = extract_json_object(reply)?;
    let required_tool_names =
        string_list(required_key(&map, "required_tool_names", reply)?, "required_tool_names", reply)?;
    let tool_usage_guidance = match map.get("tool_usage_guidance") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseError::new("`tool_usage_guidance` must be a string", reply)),
    };
    let raw_requests = required_key(&map, "tool_requests", reply)?
        .as_array()
        .ok_or_else(|| ParseError::new("`tool_requests` must be a list", reply))?;
    let mut tool_requests = Vec::with_capacity(raw_requests.len());
    for raw in raw_requests {
        let request: ToolRequest = serde_json::from_value(raw.clone())
            .map_err(|e| ParseError::new(format!("malformed tool request: {e}"), reply))?;
        request.check().map_err(|e| ParseError::new(e, reply))?;
        tool_requests.push(request);
    }
    Ok(ManagerDecision { required_tool_names, tool_usage_guidance, tool_requests })
}

/// Interior of the one and only fenced block in the reply.
pub fn parse_single_code_block(reply: &str) -> Result<String, ParseError> {
    let mut blocks = fenced_blocks(reply);
    match blocks.len() {
        0 => Err(ParseError::new("no code block", reply)),
        1 => Ok(blocks.remove(0).body),
        _ => Err(ParseError::new("multiple code blocks", reply)),
    }
}

/// Section headings the executor must produce, in their documented order.
pub const REPORT_SECTIONS: [&str; 3] = ["Reasoning & Plan", "Key Findings & Evidence", "Final Conclusion"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub reasoning_plan: String,
    pub key_findings: String,
    pub final_conclusion: String,
}

impl ExecutorReport {
    /// Canonical Markdown form, as handed to the integrator.
    pub fn to_markdown(&self) -> String {
        format!(
            "## {}\n{}\n\n## {}\n{}\n\n## {}\n{}\n",
            REPORT_SECTIONS[0],
            self.reasoning_plan,
            REPORT_SECTIONS[1],
            self.key_findings,
            REPORT_SECTIONS[2],
            self.final_conclusion
        )
    }
}

fn heading_title(line: &str) -> Option<&str> {
    let t = line.trim();
    let hashes = t.chars().take_while(|c| *c == '#').count();
    if hashes == 0 || hashes > 2 {
        return None;
    }
    Some(t[hashes..].trim())
}

/// Splits the reply on the three section headings. Matching is by heading
/// text, so section order does not matter. A section ends at the next
/// heading of level one or two, or at a closing fence.
pub fn parse_executor_report(reply: &str) -> Result<ExecutorReport, ParseError> {
    let mut sections: [Option<Vec<&str>>; 3] = [None, None, None];
    let mut current: Option<usize> = None;
    for line in reply.lines() {
        if let Some(title) = heading_title(line) {
            current = REPORT_SECTIONS.iter().position(|s| *s == title);
            if let Some(idx) = current {
                if sections[idx].is_some() {
                    return Err(ParseError::new(format!("duplicate section `## {title}`"), reply));
                }
                sections[idx] = Some(Vec::new());
            }
            continue;
        }
        if line.trim_start().starts_with("```") {
            current = None;
            continue;
        }
        if let Some(idx) = current {
            sections[idx].as_mut().expect("section opened").push(line);
        }
    }
    let missing: Vec<String> = REPORT_SECTIONS
        .iter()
        .zip(&sections)
        .filter(|(_, s)| s.is_none())
        .map(|(name, _)| format!("## {name}"))
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::new(format!("missing sections: {}", missing.join(", ")), reply));
    }
    let [a, b, c] = sections.map(|s| s.expect("checked above").join("\n").trim().to_string());
    Ok(ExecutorReport { reasoning_plan: a, key_findings: b, final_conclusion: c })
}

/// A tool call emitted by the executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorAction {
    pub tool: String,
    pub input: Value,
}

/// The action in an executor reply, if the reply is an action at all: a JSON
/// object with a string `tool` key, in a json/unlabeled fence or bare.
pub fn parse_executor_action(reply: &str) -> Option<Result<ExecutorAction, ParseError>> {
    let blocks: Vec<FencedBlock> =
        fenced_blocks(reply).into_iter().filter(|b| b.lang.is_empty() || b.lang == "json").collect();
    let parsed: Vec<Map<String, Value>> = if blocks.is_empty() {
        let trimmed = reply.trim();
        if !(trimmed.starts_with('{') && trimmed.ends_with('}')) {
            return None;
        }
        match serde_json::from_str::<Value>(trimmed) {
            Ok(Value::Object(m)) => vec![m],
            _ => return None,
        }
    } else {
        blocks
            .iter()
            .filter_map(|b| match serde_json::from_str::<Value>(&b.body) {
                Ok(Value::Object(m)) if m.contains_key("tool") => Some(m),
                _ => None,
            })
            .collect()
    };
    let mut actions = parsed.into_iter().filter(|m| m.contains_key("tool"));
    let first = actions.next()?;
    if actions.next().is_some() {
        return Some(Err(ParseError::new("more than one action in a single reply", reply)));
    }
    let tool = match first.get("tool") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Some(Err(ParseError::new("action `tool` must be a non-empty string", reply))),
    };
    let input = first.get("input").cloned().unwrap_or(Value::Object(Map::new()));
    Some(Ok(ExecutorAction { tool, input }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub final_answer: String,
    pub reasoning_summary: String,
}

fn scalar_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn parse_final_answer(reply: &str) -> Result<FinalAnswer, ParseError> {
    let map = extract_json_object(reply)?;
    let final_answer = scalar_text(required_key(&map, "final_answer", reply)?)
        .ok_or_else(|| ParseError::new("`final_answer` must be a scalar", reply))?;
    if final_answer.trim().is_empty() {
        return Err(ParseError::new("`final_answer` is empty", reply));
    }
    let reasoning_summary = required_key(&map, "reasoning_summary", reply)?
        .as_str()
        .ok_or_else(|| ParseError::new("`reasoning_summary` must be a string", reply))?
        .to_string();
    Ok(FinalAnswer { final_answer, reasoning_summary })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub cluster_id: String,
    pub suggested_master_tool_name: String,
    pub tool_names: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub clusters: Vec<ClusterSpec>,
}

pub fn parse_cluster_plan(reply: &str) -> Result<ClusterPlan, ParseError> {
    let map = extract_json_object(reply)?;
    let raw = required_key(&map, "consolidated_tool_clusters", reply)?
        .as_array()
        .ok_or_else(|| ParseError::new("`consolidated_tool_clusters` must be a list", reply))?;
    let mut clusters = Vec::with_capacity(raw.len());
    for entry in raw {
        let obj = entry.as_object().ok_or_else(|| ParseError::new("cluster must be an object", reply))?;
        let text = |key: &str| -> Result<String, ParseError> {
            obj.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| ParseError::new(format!("cluster is missing string `{key}`"), reply))
        };
        let tool_names = string_list(required_key(obj, "tool_names", reply)?, "tool_names", reply)?;
        if tool_names.is_empty() {
            return Err(ParseError::new("cluster `tool_names` is empty", reply));
        }
        clusters.push(ClusterSpec {
            cluster_id: text("cluster_id")?,
            suggested_master_tool_name: text("suggested_master_tool_name")?,
            tool_names,
        });
    }
    Ok(ClusterPlan { clusters })
}

/// `verb_target`: lowercase words joined by single underscores, at least two words.
pub(crate) fn tool_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z][a-z0-9]*(_[a-z0-9]+)+$").expect("valid regex"))
}
