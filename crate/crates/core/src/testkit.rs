//! Deterministic fixtures for tests: the tool harness, a corpus of fixture
//! tools, a rule-based fake model, canned query streams and a rig that
//! wires them into an engine.
//!
//! The fake model derives every reply from the rendered prompt alone, so
//! its answers do not depend on call order and concurrent batches stay
//! reproducible.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::evolution::{Engine, EngineConfig};
use crate::gateway::{estimate_tokens, AgentRole, ChatExchange, ChatProvider, CompletionResult, Gateway, GatewayError};
use crate::prompts::{parse_executor_report, PromptSuite, ToolRequest};
use crate::registry::{Provenance, RegistrySnapshot, ToolRecord};
use crate::sandbox::{
    default_python, validate_artifact, Limits, Provisioner, Sandbox, SandboxConfig, SingleFlight, IndexedProvisioner,
    ToolArtifact,
};
use crate::trace::TraceWriter;
use crate::workflow::QueryInput;

/// The in-interpreter shim: loads one tool module, validates the request
/// against `InputModel`, calls `run`, and prints exactly one protocol
/// document. Library chatter on stdout is redirected to stderr.
pub const HARNESS_SOURCE: &str = r#"import importlib.util
import json
import sys
import traceback


def emit(doc, out):
    out.write(json.dumps(doc, separators=(",", ":"), ensure_ascii=False, allow_nan=False))
    out.write("\n")
    out.flush()


def main():
    if len(sys.argv) != 2:
        print("usage: harness.py TOOL_SOURCE", file=sys.stderr)
        return 2
    out = sys.stdout
    sys.stdout = sys.stderr
    try:
        request = json.loads(sys.stdin.read())
        if not isinstance(request, dict) or set(request) != {"input"}:
            raise ValueError('request must be exactly {"input": ...}')
    except Exception as exc:
        print(f"bad request: {exc}", file=sys.stderr)
        return 2
    try:
        spec = importlib.util.spec_from_file_location("tool_module", sys.argv[1])
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        input_model = module.InputModel
        output_model = module.OutputModel
        run = module.run
    except BaseException:
        traceback.print_exc()
        return 3
    try:
        from pydantic import ValidationError
    except ImportError:
        ValidationError = ()
    try:
        parsed = input_model.model_validate(request["input"])
    except ValidationError as exc:
        emit({"status": "error", "kind": "ValidationError", "message": str(exc)}, out)
        return 0
    try:
        result = run(parsed)
        if not isinstance(result, output_model):
            result = output_model.model_validate(result)
        output = result.model_dump(mode="json")
        text = json.dumps({"status": "ok", "output": output}, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except (Exception, SystemExit) as exc:
        emit({"status": "error", "kind": type(exc).__name__, "message": str(exc)}, out)
        return 0
    out.write(text)
    out.write("\n")
    out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
"#;

/// Writes the harness into `dir` and returns its path.
pub fn write_harness(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir).expect("harness dir");
    let path = dir.join("harness.py");
    std::fs::write(&path, HARNESS_SOURCE).expect("write harness");
    path
}

/// Packages the fixture interpreter is expected to provide.
pub const BASE_PACKAGES: [&str; 2] = ["pydantic", "requests"];

/// A sandbox over the system interpreter with a fixed package index.
pub fn fixture_sandbox(root: &Path, limits: Limits) -> Sandbox {
    let harness = write_harness(&root.join("harness"));
    let provisioner: Arc<dyn Provisioner> = Arc::new(SingleFlight::new(IndexedProvisioner::new(default_python(), BASE_PACKAGES)));
    let config = SandboxConfig { limits, ..SandboxConfig::new(root.join("sandbox"), harness) };
    Sandbox::new(config, provisioner).expect("fixture sandbox")
}

fn tool_module(name: &str, description: &str, deps: &[&str], imports: &str, input: &str, output: &str, body: &str) -> String {
    let deps = deps.iter().map(|d| format!("\"{d}\"")).collect::<Vec<_>>().join(", ");
    format!(
        "{imports}from pydantic import BaseModel, Field\n\n__TOOL_META__ = {{\n    \"name\": \"{name}\",\n    \"description\": \"{description}\",\n    \"dependencies\": [{deps}],\n}}\n\n\nclass InputModel(BaseModel):\n{input}\n\n\nclass OutputModel(BaseModel):\n{output}\n\n\ndef run(input: InputModel) -> OutputModel:\n{body}\n"
    )
}

/// The sandbox fixture corpus. Each fixture provokes one behavior.
pub mod fixtures {
    use super::*;

    pub struct Fixture {
        pub source: String,
        pub request: ToolRequest,
    }

    impl Fixture {
        pub fn artifact(&self) -> ToolArtifact {
            validate_artifact(&self.source, &self.request).unwrap_or_else(|e| panic!("fixture {}: {e}", self.request.name))
        }
    }

    fn request(name: &str, input: Value, output: Value, deps: &[&str]) -> ToolRequest {
        ToolRequest {
            name: name.to_string(),
            description: format!("fixture {name}"),
            input_schema: input,
            output_schema: output,
            dependencies: deps.iter().map(|d| d.to_string()).collect(),
        }
    }

    fn text_in() -> Value {
        json!({"type":"object","properties":{"text":{"type":"string"}},"required":["text"]})
    }

    fn result_out() -> Value {
        json!({"type":"object","properties":{"result":{"type":"string"}},"required":["result"]})
    }

    /// ok: returns its input text.
    pub fn echo() -> Fixture {
        Fixture {
            source: tool_module(
                "echo_text",
                "fixture echo_text",
                &[],
                "",
                "    text: str = Field(..., description=\"Text to echo\")",
                "    result: str = Field(..., description=\"The same text\")",
                "    print(\"library chatter that must not reach the protocol stream\")\n    return OutputModel(result=input.text)",
            ),
            request: request("echo_text", text_in(), result_out(), &[]),
        }
    }

    /// timeout: sleeps for the requested number of seconds.
    pub fn sleep() -> Fixture {
        Fixture {
            source: tool_module(
                "sleep_seconds",
                "fixture sleep_seconds",
                &[],
                "import time\n",
                "    seconds: float = Field(..., description=\"How long to sleep\")",
                "    slept: float = Field(..., description=\"Seconds slept\")",
                "    time.sleep(input.seconds)\n    return OutputModel(slept=input.seconds)",
            ),
            request: request(
                "sleep_seconds",
                json!({"type":"object","properties":{"seconds":{"type":"number"}},"required":["seconds"]}),
                json!({"type":"object","properties":{"slept":{"type":"number"}},"required":["slept"]}),
                &[],
            ),
        }
    }

    /// tool_error: `run` raises.
    pub fn raise() -> Fixture {
        Fixture {
            source: tool_module(
                "raise_error",
                "fixture raise_error",
                &[],
                "",
                "    text: str = Field(..., description=\"Ignored\")",
                "    result: str = Field(..., description=\"Never produced\")",
                "    raise RuntimeError(\"deliberate failure: \" + input.text)",
            ),
            request: request("raise_error", text_in(), result_out(), &[]),
        }
    }

    /// protocol_error: the output model accepts a value the declared
    /// output schema rejects.
    pub fn bad_output() -> Fixture {
        Fixture {
            source: tool_module(
                "emit_wrong_type",
                "fixture emit_wrong_type",
                &[],
                "from typing import Any\n",
                "    text: str = Field(..., description=\"Ignored\")",
                "    result: Any = Field(..., description=\"Declared as a string\")",
                "    return OutputModel(result=len(input.text))",
            ),
            request: request("emit_wrong_type", text_in(), result_out(), &[]),
        }
    }

    /// protocol_error: writes garbage straight to file descriptor 1.
    pub fn noisy() -> Fixture {
        Fixture {
            source: tool_module(
                "write_raw_stdout",
                "fixture write_raw_stdout",
                &[],
                "import os\n",
                "    text: str = Field(..., description=\"Written raw\")",
                "    result: str = Field(..., description=\"Echo\")",
                "    os.write(1, input.text.encode())\n    return OutputModel(result=input.text)",
            ),
            request: request("write_raw_stdout", text_in(), result_out(), &[]),
        }
    }

    /// protocol_error: the interpreter exits nonzero without a document.
    pub fn crash() -> Fixture {
        Fixture {
            source: tool_module(
                "exit_abruptly",
                "fixture exit_abruptly",
                &[],
                "import os\n",
                "    text: str = Field(..., description=\"Ignored\")",
                "    result: str = Field(..., description=\"Never produced\")",
                "    os._exit(7)",
            ),
            request: request("exit_abruptly", text_in(), result_out(), &[]),
        }
    }

    /// Tries to create `path`; returns where it wrote.
    pub fn escape() -> Fixture {
        Fixture {
            source: tool_module(
                "write_outside_file",
                "fixture write_outside_file",
                &[],
                "",
                "    path: str = Field(..., description=\"Target path\")",
                "    result: str = Field(..., description=\"Written path\")",
                "    with open(input.path, \"w\") as fh:\n        fh.write(\"escaped\")\n    return OutputModel(result=input.path)",
            ),
            request: request(
                "write_outside_file",
                json!({"type":"object","properties":{"path":{"type":"string"}},"required":["path"]}),
                result_out(),
                &[],
            ),
        }
    }

    /// Reports its working directory and writes a file there.
    pub fn cwd() -> Fixture {
        Fixture {
            source: tool_module(
                "probe_workdir",
                "fixture probe_workdir",
                &[],
                "import os\n",
                "    text: str = Field(..., description=\"File content\")",
                "    result: str = Field(..., description=\"Working directory\")",
                "    with open(\"note.txt\", \"w\") as fh:\n        fh.write(input.text)\n    assert os.environ[\"TOOL_SCRATCH_DIR\"] == os.getcwd()\n    return OutputModel(result=os.getcwd())",
            ),
            request: request("probe_workdir", text_in(), result_out(), &[]),
        }
    }

    /// Imports a declared third-party dependency.
    pub fn deps() -> Fixture {
        Fixture {
            source: tool_module(
                "report_requests_version",
                "fixture report_requests_version",
                &["requests"],
                "",
                "    text: str = Field(..., description=\"Ignored\")",
                "    result: str = Field(..., description=\"Library version\")",
                "    import requests\n    return OutputModel(result=requests.__version__)",
            ),
            request: request("report_requests_version", text_in(), result_out(), &["requests"]),
        }
    }

    /// Declares a dependency no environment can provide.
    pub fn unresolvable() -> Fixture {
        Fixture {
            source: tool_module(
                "use_missing_package",
                "fixture use_missing_package",
                &["definitely-not-a-real-package-xyz"],
                "",
                "    text: str = Field(..., description=\"Ignored\")",
                "    result: str = Field(..., description=\"Never produced\")",
                "    return OutputModel(result=input.text)",
            ),
            request: request("use_missing_package", text_in(), result_out(), &["definitely-not-a-real-package-xyz"]),
        }
    }
}

/// What a query asks for, in the fake model's small query language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Capability {
    WordCount,
    Sum,
    Reverse,
    Divide,
}

impl Capability {
    /// Canonical name the aggregator suggests for a cluster.
    pub fn master(&self) -> &'static str {
        match self {
            Capability::WordCount => "count_words",
            Capability::Sum => "sum_numbers",
            Capability::Reverse => "reverse_text",
            Capability::Divide => "divide_numbers",
        }
    }

    fn names(&self) -> &'static [&'static str] {
        match self {
            Capability::WordCount => &["count_words", "tally_words"],
            Capability::Sum => &["add_numbers", "sum_values", "sum_numbers"],
            Capability::Reverse => &["reverse_text"],
            Capability::Divide => &["divide_numbers"],
        }
    }

    fn blurb(&self) -> &'static str {
        match self {
            Capability::WordCount => "count the words in a text",
            Capability::Sum => "add up a list of numbers",
            Capability::Reverse => "reverse a text",
            Capability::Divide => "divide one number by another",
        }
    }

    pub fn input_schema(&self) -> Value {
        match self {
            Capability::WordCount | Capability::Reverse => {
                json!({"type":"object","properties":{"text":{"type":"string"}},"required":["text"]})
            }
            Capability::Sum => {
                json!({"type":"object","properties":{"numbers":{"type":"array","items":{"type":"number"}}},"required":["numbers"]})
            }
            Capability::Divide => json!({
                "type":"object",
                "properties":{"dividend":{"type":"number"},"divisor":{"type":"number"}},
                "required":["dividend","divisor"]
            }),
        }
    }

    pub fn output_schema(&self) -> Value {
        match self {
            Capability::WordCount => json!({"type":"object","properties":{"count":{"type":"integer"}},"required":["count"]}),
            Capability::Sum => json!({"type":"object","properties":{"total":{"type":"number"}},"required":["total"]}),
            Capability::Reverse => json!({"type":"object","properties":{"result":{"type":"string"}},"required":["result"]}),
            Capability::Divide => json!({"type":"object","properties":{"quotient":{"type":"number"}},"required":["quotient"]}),
        }
    }
}

/// Capability of a tool name, ignoring `_2` / `_v2` style suffixes.
pub fn capability_of(name: &str) -> Option<Capability> {
    let base = regex::Regex::new(r"_v?\d+$").expect("valid regex").replace(name, "").to_string();
    [Capability::WordCount, Capability::Sum, Capability::Reverse, Capability::Divide]
        .into_iter()
        .find(|c| c.names().contains(&base.as_str()))
}

pub fn tool_description(name: &str) -> String {
    match name {
        "count_words" => "Count the words in a text".into(),
        "tally_words" => "Tally how many words a text contains".into(),
        "add_numbers" => "Add a list of numbers".into(),
        "sum_values" => "Sum a list of numeric values".into(),
        "sum_numbers" => "Sum a list of numbers".into(),
        "reverse_text" => "Reverse a text string".into(),
        "divide_numbers" => "Divide one number by another".into(),
        other => format!("Tool {other}"),
    }
}

/// A valid tool module implementing `cap` under `name`.
pub fn capability_source(name: &str, cap: Capability) -> String {
    let description = tool_description(name);
    match cap {
        Capability::WordCount => tool_module(
            name,
            &description,
            &[],
            "",
            "    text: str = Field(..., description=\"Text to analyze\")",
            "    count: int = Field(..., description=\"Number of whitespace-separated words\")",
            "    return OutputModel(count=len(input.text.split()))",
        ),
        Capability::Sum => tool_module(
            name,
            &description,
            &[],
            "from typing import List\n",
            "    numbers: List[float] = Field(..., description=\"Numbers to add\")",
            "    total: float = Field(..., description=\"Sum of the numbers\")",
            "    return OutputModel(total=sum(input.numbers))",
        ),
        Capability::Reverse => tool_module(
            name,
            &description,
            &[],
            "",
            "    text: str = Field(..., description=\"Text to reverse\")",
            "    result: str = Field(..., description=\"Reversed text\")",
            "    return OutputModel(result=input.text[::-1])",
        ),
        Capability::Divide => tool_module(
            name,
            &description,
            &[],
            "",
            "    dividend: float = Field(..., description=\"Number to divide\")\n    divisor: float = Field(..., description=\"Number to divide by\")",
            "    quotient: float = Field(..., description=\"Result of the division\")",
            "    return OutputModel(quotient=input.dividend / input.divisor)",
        ),
    }
}

/// A registry record for a capability tool, as if synthesized for
/// `query_id` at `step`.
pub fn capability_record(name: &str, cap: Capability, step: u64, query_id: &str) -> ToolRecord {
    let request = ToolRequest {
        name: name.to_string(),
        description: tool_description(name),
        input_schema: cap.input_schema(),
        output_schema: cap.output_schema(),
        dependencies: Vec::new(),
    };
    let artifact = validate_artifact(&capability_source(name, cap), &request).unwrap_or_else(|e| panic!("{name}: {e}"));
    ToolRecord::from_artifact(&artifact, Provenance::Synthesized { step, query_id: query_id.to_string() })
}

/// A parsed query of the fake model's query language.
#[derive(Debug, Clone, PartialEq)]
pub struct Intent {
    pub capability: Capability,
    /// Tool name the manager requests when nothing suitable exists.
    pub preferred: &'static str,
    pub input: Value,
}

fn numbers(text: &str) -> Vec<Value> {
    text.split_whitespace()
        .filter_map(|t| t.parse::<i64>().map(Value::from).ok().or_else(|| t.parse::<f64>().ok().map(Value::from)))
        .collect()
}

/// Parses `Count the words: ...`, `Tally the words: ...`,
/// `Add the numbers: 1 2`, `Sum the values: 1 2`, `Reverse the text: ...`
/// and `Divide A by B`.
pub fn parse_intent(query: &str) -> Option<Intent> {
    let q = query.trim();
    let text_rules: [(&str, Capability, &str); 3] = [
        ("Count the words: ", Capability::WordCount, "count_words"),
        ("Tally the words: ", Capability::WordCount, "tally_words"),
        ("Reverse the text: ", Capability::Reverse, "reverse_text"),
    ];
    for (prefix, capability, preferred) in text_rules {
        if let Some(rest) = q.strip_prefix(prefix) {
            return Some(Intent { capability, preferred, input: json!({"text": rest}) });
        }
    }
    for (prefix, preferred) in [("Add the numbers: ", "add_numbers"), ("Sum the values: ", "sum_values")] {
        if let Some(rest) = q.strip_prefix(prefix) {
            return Some(Intent { capability: Capability::Sum, preferred, input: json!({"numbers": numbers(rest)}) });
        }
    }
    if let Some(rest) = q.strip_prefix("Divide ") {
        let (a, b) = rest.split_once(" by ")?;
        let n = numbers(&format!("{a} {b}"));
        if n.len() == 2 {
            return Some(Intent {
                capability: Capability::Divide,
                preferred: "divide_numbers",
                input: json!({"dividend": n[0], "divisor": n[1]}),
            });
        }
    }
    None
}

/// The answer the tool for `intent` produces, formatted as the fake
/// executor reports it. `None` when the tool fails.
pub fn expected_answer(query: &str) -> Option<String> {
    let intent = parse_intent(query)?;
    let input = &intent.input;
    match intent.capability {
        Capability::WordCount => Some(input["text"].as_str()?.split_whitespace().count().to_string()),
        Capability::Reverse => Some(input["text"].as_str()?.chars().rev().collect()),
        Capability::Sum => Some(format_number(input["numbers"].as_array()?.iter().filter_map(Value::as_f64).sum())),
        Capability::Divide => {
            let (a, b) = (input["dividend"].as_f64()?, input["divisor"].as_f64()?);
            (b != 0.0).then(|| format_number(a / b))
        }
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.as_f64().map(format_number).unwrap_or_else(|| n.to_string()),
        other => other.to_string(),
    }
}

/// Behavior switches for the fake model.
#[derive(Debug, Clone, Default)]
pub struct FakeLlmOptions {
    /// The developer's first attempt for these tool names fails validation.
    pub flaky_developer: BTreeSet<String>,
    /// The aggregator keeps every tool separate.
    pub singleton_aggregator: bool,
    /// The aggregator's first plan omits a tool.
    pub aggregator_omits_first: bool,
    /// Every aggregator plan omits a tool.
    pub aggregator_always_invalid: bool,
    /// The merger replies without a code block.
    pub broken_merger: bool,
    /// The manager never synthesizes and only reuses listed tools.
    pub reuse_only: bool,
}

/// Rule-based stand-in for a chat model.
#[derive(Debug, Clone, Default)]
pub struct FakeLlm {
    pub options: FakeLlmOptions,
}

fn section<'t>(text: &'t str, start: &str, end: &str) -> &'t str {
    let Some(i) = text.find(start) else { return "" };
    let rest = &text[i + start.len()..];
    match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    }
}

fn bullet_names(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("- **"))
        .filter_map(|l| l.split_once("**").map(|(n, _)| n.to_string()))
        .collect()
}

fn fenced(lang: &str, body: &str) -> String {
    format!("```{lang}\n{body}\n```")
}

impl FakeLlm {
    pub fn new(options: FakeLlmOptions) -> Self {
        Self { options }
    }

    fn manager(&self, prompt: &str) -> String {
        let query = section(prompt, "## Task\n", "\n").trim().to_string();
        let available = bullet_names(section(prompt, "# Available Tools", "# Analysis Instructions"));
        let (required, requests): (Vec<String>, Vec<Value>) = match parse_intent(&query) {
            None => (Vec::new(), Vec::new()),
            Some(intent) => match available.iter().find(|n| capability_of(n) == Some(intent.capability)) {
                Some(existing) => (vec![existing.clone()], Vec::new()),
                None if self.options.reuse_only => (Vec::new(), Vec::new()),
                None => (
                    Vec::new(),
                    vec![json!({
                        "name": intent.preferred,
                        "description": tool_description(intent.preferred),
                        "input_schema": intent.capability.input_schema(),
                        "output_schema": intent.capability.output_schema(),
                    })],
                ),
            },
        };
        let guidance: Vec<String> = required
            .iter()
            .cloned()
            .chain(requests.iter().filter_map(|r| r["name"].as_str().map(str::to_string)))
            .map(|n| format!("{n}: {}", capability_of(&n).map(|c| c.blurb()).unwrap_or("helper")))
            .collect();
        let body = json!({
            "required_tool_names": required,
            "tool_usage_guidance": guidance.join("; "),
            "tool_requests": requests,
        });
        fenced("json", &serde_json::to_string_pretty(&body).expect("json"))
    }

    fn developer(&self, ex: &ChatExchange) -> String {
        let prompt = &ex.messages[0].content;
        let request: Value = prompt
            .rsplit_once("TOOL_REQUEST (JSON):")
            .and_then(|(_, json)| serde_json::from_str(json.trim()).ok())
            .unwrap_or(Value::Null);
        let name = request["name"].as_str().unwrap_or("unknown_tool");
        if ex.messages.len() == 1 && self.options.flaky_developer.contains(name) {
            return fenced("python", "def run(input):\n    return None\n");
        }
        match capability_of(name) {
            Some(cap) => fenced("python", capability_source(name, cap).trim_end()),
            None => "I cannot implement this tool.".to_string(),
        }
    }

    fn executor(&self, ex: &ChatExchange) -> String {
        let system = &ex.messages[0].content;
        let query = ex.messages.get(1).map(|m| m.content.as_str()).unwrap_or("");
        let bound: Vec<String> = bullet_names(section(system, "## Bound Tools", "## Tool Calling"))
            .into_iter()
            .filter(|n| n != crate::prompts::REQUEST_TOOLS)
            .collect();
        let intent = parse_intent(query);
        if ex.messages.len() <= 2 {
            let Some(intent) = intent else {
                return report(
                    "The query is outside every known capability.",
                    "* No tool applies.",
                    "The task is not completable: the query is outside the known capabilities.",
                );
            };
            if let Some(tool) = bound.iter().find(|n| capability_of(n) == Some(intent.capability)) {
                return fenced("json", &json!({"tool": tool, "input": intent.input}).to_string());
            }
            if system.contains("## Context Summary") {
                return report(
                    "No bound tool provides the capability.",
                    "* The manager could not provide a tool.",
                    "The task is not completable: no tool is available.",
                );
            }
            return fenced(
                "json",
                &json!({"tool": crate::prompts::REQUEST_TOOLS, "input": {"requests": format!("a tool that can {}", intent.capability.blurb())}})
                    .to_string(),
            );
        }
        let observation = &ex.messages.last().expect("observation").content;
        let (head, body) = observation.split_once('\n').unwrap_or((observation.as_str(), ""));
        let tool = head.split('`').nth(1).unwrap_or("tool");
        let parsed: Value = serde_json::from_str(body).unwrap_or(Value::Null);
        if head.ends_with("(ok):") {
            let value = parsed.as_object().and_then(|o| o.values().next()).map(format_value).unwrap_or_default();
            report(
                &format!("Call `{tool}` once and read its output."),
                &format!("* `{tool}` returned {body}"),
                &value,
            )
        } else {
            let message = parsed.get("message").and_then(Value::as_str).unwrap_or(body);
            report(
                &format!("Call `{tool}` once and read its output."),
                &format!("* `{tool}` failed: {message}"),
                &format!("The task is not completable: {message}"),
            )
        }
    }

    fn integrator(&self, ex: &ChatExchange) -> String {
        let report_text = ex.messages.get(1).map(|m| m.content.as_str()).unwrap_or("");
        let conclusion = parse_executor_report(report_text).map(|r| r.final_conclusion).unwrap_or_default();
        let body = json!({
            "final_answer": conclusion.trim(),
            "reasoning_summary": "Read directly from the tool output cited in the key findings.",
        });
        fenced("json", &serde_json::to_string_pretty(&body).expect("json"))
    }

    fn aggregator(&self, ex: &ChatExchange) -> String {
        let prompt = &ex.messages[0].content;
        let names: Vec<String> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- Name: **'"))
            .filter_map(|l| l.split_once("'**").map(|(n, _)| n.to_string()))
            .collect();
        let mut clusters: Vec<(String, Vec<String>)> = Vec::new();
        for name in &names {
            let key = match capability_of(name) {
                Some(cap) if !self.options.singleton_aggregator => cap.master().to_string(),
                _ => name.clone(),
            };
            match clusters.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(name.clone()),
                None => clusters.push((key, vec![name.clone()])),
            }
        }
        let first_attempt = ex.messages.len() == 1;
        if self.options.aggregator_always_invalid || (self.options.aggregator_omits_first && first_attempt) {
            if let Some((_, members)) = clusters.last_mut() {
                members.pop();
            }
        }
        let body = json!({
            "consolidated_tool_clusters": clusters
                .iter()
                .enumerate()
                .map(|(i, (key, members))| json!({
                    "cluster_id": format!("Cluster_{i}"),
                    "suggested_master_tool_name": if members.len() > 1 { key.clone() } else { members.first().cloned().unwrap_or_default() },
                    "tool_names": members,
                }))
                .collect::<Vec<_>>(),
        });
        fenced("json", &serde_json::to_string_pretty(&body).expect("json"))
    }

    fn merger(&self, ex: &ChatExchange) -> String {
        if self.options.broken_merger {
            return "I merged them, but forgot the code.".to_string();
        }
        let prompt = &ex.messages[0].content;
        let name = merger_suggestion(prompt).unwrap_or_default().to_string();
        let member = section(prompt, "The 1th Tool ", " Begin").trim().to_string();
        match capability_of(&member) {
            Some(cap) => fenced("python", capability_source(&name, cap).trim_end()),
            None => "Cannot merge.".to_string(),
        }
    }
}

fn report(plan: &str, findings: &str, conclusion: &str) -> String {
    format!("## Reasoning & Plan\n* **Analysis:** {plan}\n\n## Key Findings & Evidence\n{findings}\n\n## Final Conclusion\n{conclusion}\n")
}

impl ChatProvider for FakeLlm {
    fn id(&self) -> &str {
        "fake"
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        if exchange.messages.is_empty() {
            return Err(GatewayError::EmptyExchange);
        }
        let text = match exchange.agent_role {
            AgentRole::Manager => self.manager(&exchange.messages[0].content),
            AgentRole::ToolDeveloper => self.developer(exchange),
            AgentRole::Executor => self.executor(exchange),
            AgentRole::Integrator => self.integrator(exchange),
            AgentRole::Aggregator => self.aggregator(exchange),
            AgentRole::Merger => self.merger(exchange),
        };
        let prompt: String = exchange.messages.iter().map(|m| m.content.as_str()).collect();
        Ok(CompletionResult {
            prompt_tokens: estimate_tokens(&prompt),
            completion_tokens: estimate_tokens(&text),
            text,
            provider_id: "fake".to_string(),
        })
    }
}

/// Wraps a provider and keeps every exchange it sees.
pub struct Capturing<P> {
    inner: P,
    seen: std::sync::Mutex<Vec<ChatExchange>>,
}

impl<P: ChatProvider> Capturing<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, seen: std::sync::Mutex::new(Vec::new()) }
    }

    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.seen.lock().expect("capture lock poisoned").clone()
    }

    pub fn calls(&self, role: AgentRole) -> Vec<ChatExchange> {
        self.exchanges().into_iter().filter(|e| e.agent_role == role).collect()
    }
}

impl<P: ChatProvider> ChatProvider for Capturing<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        self.seen.lock().expect("capture lock poisoned").push(exchange.clone());
        self.inner.complete(exchange)
    }
}

/// A provider whose reply is computed by a closure.
pub struct ReplyFn<F>(pub F);

impl<F: Fn(&ChatExchange) -> String + Send + Sync> ChatProvider for ReplyFn<F> {
    fn id(&self) -> &str {
        "reply-fn"
    }

    fn complete(&self, exchange: &ChatExchange) -> Result<CompletionResult, GatewayError> {
        let text = (self.0)(exchange);
        Ok(CompletionResult {
            prompt_tokens: exchange.messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
            completion_tokens: estimate_tokens(&text),
            text,
            provider_id: "reply-fn".to_string(),
        })
    }
}

/// The master name a merger prompt asks for.
pub fn merger_suggestion(prompt: &str) -> Option<&str> {
    let name = section(prompt, "In the `name`, you should use ", ".").trim();
    (!name.is_empty()).then_some(name)
}

/// Builds a stream with ids `q0001...`.
pub fn stream(texts: &[&str]) -> Vec<QueryInput> {
    texts.iter().enumerate().map(|(i, t)| QueryInput::new(format!("q{:04}", i + 1), *t)).collect()
}

/// Twelve queries. At batch size 4 the first batch synthesizes
/// `count_words`, `tally_words`, `add_numbers` and `sum_values`, merged into
/// `count_words` and `sum_numbers`; the second synthesizes `reverse_text`;
/// everything after that is reuse.
pub fn evolution_stream() -> Vec<QueryInput> {
    stream(&[
        "Count the words: the quick brown fox",
        "Tally the words: jumps over the lazy dog",
        "Add the numbers: 1 2 3",
        "Sum the values: 10 20 30 40",
        "Reverse the text: stressed",
        "Count the words: a b",
        "Sum the values: 7 8",
        "Tally the words: one",
        "Reverse the text: drawer",
        "Add the numbers: 100 -1",
        "Count the words: to be or not to be",
        "Sum the values: 0.5 0.25",
    ])
}

/// Queries answerable with the tools `evolution_stream` leaves behind.
pub fn reuse_stream() -> Vec<QueryInput> {
    stream(&[
        "Count the words: warm start needs no new tools",
        "Sum the values: 3 4 5",
        "Reverse the text: level up",
        "Tally the words: reuse only",
        "Add the numbers: 2 2",
        "Reverse the text: abc",
    ])
}

/// Sixteen queries, two batches at B=8. Each batch has two tool queries
/// (synthesis in the first, reuse in the second) among queries no tool
/// serves, which keeps the interpreter count low.
pub fn isolation_stream() -> Vec<QueryInput> {
    stream(&[
        "Count the words: isolation holds",
        "Describe visitor 1",
        "Describe visitor 2",
        "Add the numbers: 4 5",
        "Describe visitor 3",
        "Describe visitor 4",
        "Describe visitor 5",
        "Describe visitor 6",
        "Describe visitor 7",
        "Sum the values: 1 1",
        "Describe visitor 8",
        "Describe visitor 9",
        "Tally the words: same snapshot",
        "Describe visitor 10",
        "Describe visitor 11",
        "Describe visitor 12",
    ])
}

/// Eleven divisions, two of them by zero.
pub fn division_stream() -> Vec<QueryInput> {
    stream(&[
        "Divide 6 by 3",
        "Divide 1 by 0",
        "Divide 9 by 2",
        "Divide 10 by 5",
        "Divide 7 by 7",
        "Divide 5 by 0",
        "Divide 100 by 4",
        "Divide 3 by 4",
        "Divide 8 by 2",
        "Divide 12 by 3",
        "Divide 1 by 8",
    ])
}

/// A temporary directory with a fixture sandbox and the prompt suite.
pub struct Rig {
    pub dir: tempfile::TempDir,
    pub sandbox: Arc<Sandbox>,
    pub prompts: Arc<PromptSuite>,
}

impl Default for Rig {
    fn default() -> Self {
        Self::new()
    }
}

impl Rig {
    pub fn new() -> Self {
        Self::with_limits(Limits { timeout: std::time::Duration::from_secs(30), ..Limits::default() })
    }

    pub fn with_limits(limits: Limits) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let sandbox = Arc::new(fixture_sandbox(dir.path(), limits));
        let prompts = Arc::new(PromptSuite::load().expect("prompt suite"));
        Self { dir, sandbox, prompts }
    }

    pub fn gateway(&self, provider: impl ChatProvider + 'static) -> Arc<Gateway> {
        Arc::new(Gateway::new(Arc::new(provider)))
    }

    pub fn engine(&self, gateway: Arc<Gateway>, config: EngineConfig, trace: Arc<TraceWriter>, initial: RegistrySnapshot) -> Engine {
        Engine::new(gateway, self.sandbox.clone(), self.prompts.clone(), config, trace, initial)
    }
}
