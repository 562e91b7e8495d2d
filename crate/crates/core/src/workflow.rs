//! The fixed per-query workflow.
//!
//! ```text
//! ManagerSelect ──> Synthesize ──> Execute ──> Integrate ──> Done
//!      │  ^                          │  │          │
//!      │  └──── Suspended <──────────┘  │          │
//!      │  └──── Failed (bounded) <──────┘          │
//!      └──────> Failed (terminal) <────────────────┘
//! ```
//!
//! A job reads only the frozen snapshot it was started with. Tools it
//! synthesizes are private to the job until the batch barrier. Every phase
//! change, model exchange, validation and invocation is buffered as an
//! [`EventDraft`] in job order; the batch appends them to the trace in
//! stream order, so traces do not depend on worker scheduling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::gateway::{estimate_tokens, AgentRole, ChatExchange, ChatMessage, FunctionSpec, Gateway, GatewayError};
use crate::prompts::{
    parse_executor_action, parse_executor_report, parse_final_answer, parse_manager, parse_single_code_block,
    ExecutorReport, FinalAnswer, ManagerDecision, PromptError, PromptSuite, Slots, ToolRequest, ToolSlot, REQUEST_TOOLS,
};
use crate::registry::{Provenance, RegistrySnapshot, ToolRecord, ToolStats};
use crate::sandbox::{validate_artifact, InvocationStatus, Sandbox, ToolArtifact};
use crate::metrics::QuerySample;
use crate::trace::{EventDraft, EventKind};

/// Upper bounds on per-job model and tool effort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Executor replies per executor phase.
    pub executor_steps: u32,
    /// Developer attempts per tool request.
    pub developer_retries: u32,
    /// Extra manager attempts per manager phase.
    pub manager_replans: u32,
    /// Suspensions per job.
    pub suspensions: u32,
    /// Extra integrator attempts.
    pub integrator_retries: u32,
    /// Returns from a failed execution to the manager.
    pub failure_restarts: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            executor_steps: 30,
            developer_retries: 3,
            manager_replans: 2,
            suspensions: 3,
            integrator_retries: 1,
            failure_restarts: 1,
        }
    }
}

impl Budgets {
    /// Names of fields that must be at least 1 but are not.
    pub fn invalid_fields(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        if self.executor_steps == 0 {
            bad.push("executor_steps");
        }
        if self.developer_retries == 0 {
            bad.push("developer_retries");
        }
        if self.manager_replans == 0 {
            bad.push("manager_replans");
        }
        if self.suspensions == 0 {
            bad.push("suspensions");
        }
        bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ManagerSelect,
    Synthesize,
    Execute,
    Suspended,
    Integrate,
    Done,
    Failed,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::ManagerSelect => "manager_select",
            Phase::Synthesize => "synthesize",
            Phase::Execute => "execute",
            Phase::Suspended => "suspended",
            Phase::Integrate => "integrate",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        [
            Phase::ManagerSelect,
            Phase::Synthesize,
            Phase::Execute,
            Phase::Suspended,
            Phase::Integrate,
            Phase::Done,
            Phase::Failed,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

/// The transition table. `None` is the job start.
pub fn is_legal_transition(from: Option<Phase>, to: Phase) -> bool {
    use Phase::*;
    match from {
        None => to == ManagerSelect,
        Some(ManagerSelect) => matches!(to, Synthesize | Execute | Failed),
        Some(Synthesize) => to == Execute,
        Some(Execute) => matches!(to, Suspended | Integrate | Failed),
        Some(Suspended) => to == ManagerSelect,
        Some(Integrate) => matches!(to, Done | Failed),
        Some(Failed) => to == ManagerSelect,
        Some(Done) => false,
    }
}

/// One query of the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInput {
    pub id: String,
    pub text: String,
}

impl QueryInput {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

/// Everything a job returns to the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub query_id: String,
    pub answer: FinalAnswer,
    /// `true` for Done, `false` for a terminal Failed.
    pub completed: bool,
    /// Validation-passing tools synthesized by this job, with their usage.
    pub local_tools: Vec<ToolRecord>,
    pub sample: QuerySample,
    /// Usage of snapshot tools, keyed by canonical name.
    pub global_stats: BTreeMap<String, ToolStats>,
    pub phases: Vec<Phase>,
    /// Listing digest of the snapshot the job observed.
    pub listing_digest: String,
    pub events: Vec<EventDraft>,
}

/// Shared, read-only collaborators of a job.
#[derive(Clone, Copy)]
pub struct WorkflowContext<'a> {
    pub gateway: &'a Gateway,
    pub sandbox: &'a Sandbox,
    pub prompts: &'a PromptSuite,
    pub budgets: &'a Budgets,
}

#[derive(Debug)]
enum Abort {
    Gateway(GatewayError),
    Prompt(PromptError),
}

impl std::fmt::Display for Abort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Abort::Gateway(e) => write!(f, "model call failed: {e}"),
            Abort::Prompt(e) => write!(f, "prompt rendering failed: {e}"),
        }
    }
}

impl From<GatewayError> for Abort {
    fn from(e: GatewayError) -> Self {
        Abort::Gateway(e)
    }
}

impl From<PromptError> for Abort {
    fn from(e: PromptError) -> Self {
        Abort::Prompt(e)
    }
}

enum ExecOutcome {
    Report(ExecutorReport),
    Suspend(String),
    Failure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Global,
    Local,
}

struct Observation {
    tool: String,
    input: Value,
    status: &'static str,
    text: String,
}

struct Job<'a> {
    ctx: WorkflowContext<'a>,
    query: &'a QueryInput,
    snapshot: &'a RegistrySnapshot,
    phase: Option<Phase>,
    phases: Vec<Phase>,
    events: Vec<EventDraft>,
    bound: BTreeMap<String, (ToolArtifact, Origin)>,
    locals: Vec<ToolArtifact>,
    stats: BTreeMap<String, ToolStats>,
    sample: QuerySample,
    guidance: String,
    observations: Vec<Observation>,
    failure_notes: Vec<String>,
    /// The capability request of the most recent suspension.
    suspended_for: Option<String>,
}

/// Runs one query to Done or terminal Failed against a frozen snapshot.
pub fn run_query(query: &QueryInput, snapshot: &RegistrySnapshot, ctx: WorkflowContext<'_>) -> JobOutcome {
    let mut job = Job {
        ctx,
        query,
        snapshot,
        phase: None,
        phases: Vec::new(),
        events: Vec::new(),
        bound: BTreeMap::new(),
        locals: Vec::new(),
        stats: BTreeMap::new(),
        sample: QuerySample { query_id: query.id.clone(), ..Default::default() },
        guidance: String::new(),
        observations: Vec::new(),
        failure_notes: Vec::new(),
        suspended_for: None,
    };
    let result = job.drive();
    let (answer, completed) = match result {
        Ok(answer) => (answer, true),
        Err(reason) => {
            job.enter(Phase::Failed, json!({"reason": reason, "terminal": true}));
            (incompletion_answer(&reason), false)
        }
    };
    job.finish(answer, completed)
}

/// The structured answer of a job that could not complete.
pub fn incompletion_answer(reason: &str) -> FinalAnswer {
    FinalAnswer {
        final_answer: "The task is not completable.".to_string(),
        reasoning_summary: format!("The task is not completable: {reason}"),
    }
}

fn function_spec(artifact: &ToolArtifact) -> FunctionSpec {
    FunctionSpec { name: artifact.name.clone(), description: artifact.description.clone(), parameters: artifact.input_schema.clone() }
}

fn request_tools_spec() -> FunctionSpec {
    FunctionSpec {
        name: REQUEST_TOOLS.to_string(),
        description: "Suspend execution and ask the Manager for capabilities missing from the bound tool list.".to_string(),
        parameters: json!({"type": "object", "properties": {"requests": {"type": "string"}}, "required": ["requests"]}),
    }
}

fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl<'a> Job<'a> {
    fn enter(&mut self, to: Phase, detail: Value) {
        debug_assert!(is_legal_transition(self.phase, to), "illegal transition {:?} -> {to:?}", self.phase);
        let mut payload = json!({
            "query_id": self.query.id,
            "from": self.phase.map(|p| p.as_str()),
            "to": to.as_str(),
        });
        if let (Value::Object(p), Value::Object(d)) = (&mut payload, detail) {
            p.extend(d);
        }
        self.events.push(EventDraft::new(EventKind::Phase, payload));
        self.phase = Some(to);
        self.phases.push(to);
    }

    fn complete(&mut self, role: AgentRole, messages: Vec<ChatMessage>, functions: Vec<FunctionSpec>) -> Result<String, Abort> {
        let exchange = ChatExchange::new(role, messages)?.with_functions(functions);
        let digest = exchange.digest();
        let result = self.ctx.gateway.complete(exchange);
        match result {
            Ok(r) => {
                self.events.push(EventDraft::new(
                    EventKind::LlmExchange,
                    json!({
                        "query_id": self.query.id,
                        "role": role.as_str(),
                        "exchange_digest": digest,
                        "response_digest": text_digest(&r.text),
                        "prompt_tokens": r.prompt_tokens,
                        "completion_tokens": r.completion_tokens,
                        "provider": r.provider_id,
                    }),
                ));
                Ok(r.text)
            }
            Err(e) => {
                self.events.push(EventDraft::new(
                    EventKind::LlmExchange,
                    json!({"query_id": self.query.id, "role": role.as_str(), "exchange_digest": digest, "error": e.to_string()}),
                ));
                Err(e.into())
            }
        }
    }

    fn drive(&mut self) -> Result<FinalAnswer, String> {
        self.enter(
            Phase::ManagerSelect,
            json!({
                "query": self.query.text,
                "snapshot_step": self.snapshot.step(),
                "listing_digest": self.snapshot.listing_digest(),
            }),
        );
        let mut failure_report: Option<String> = None;
        let mut executor_requests: Option<String> = None;
        let mut suspensions = 0;
        let mut restarts = 0;
        loop {
            let decision = self.manager_phase(failure_report.take(), executor_requests.take()).map_err(|e| e.to_string())?;
            let Some(decision) = decision else {
                return Err("manager produced no usable plan within the re-plan budget".to_string());
            };
            if !decision.tool_requests.is_empty() {
                self.enter(Phase::Synthesize, json!({"requests": decision.tool_requests.iter().map(|r| &r.name).collect::<Vec<_>>()}));
                for request in &decision.tool_requests {
                    self.synthesize(request).map_err(|e| e.to_string())?;
                }
            }
            self.enter(Phase::Execute, json!({"bound_tools": self.bound.keys().collect::<Vec<_>>()}));
            match self.executor_loop().map_err(|e| e.to_string())? {
                ExecOutcome::Report(report) => {
                    self.enter(Phase::Integrate, json!({}));
                    return match self.integrate(&report).map_err(|e| e.to_string())? {
                        Some(answer) => {
                            self.enter(Phase::Done, json!({"final_answer": answer.final_answer}));
                            Ok(answer)
                        }
                        None => Err("integrator reply could not be parsed".to_string()),
                    };
                }
                ExecOutcome::Suspend(requests) if suspensions < self.ctx.budgets.suspensions => {
                    suspensions += 1;
                    self.enter(Phase::Suspended, json!({"requests": requests, "suspension": suspensions}));
                    self.enter(Phase::ManagerSelect, json!({}));
                    self.suspended_for = Some(requests.clone());
                    executor_requests = Some(requests);
                    failure_report = self.take_failure_notes();
                }
                ExecOutcome::Suspend(_) => {
                    return Err(format!("suspension budget ({}) exhausted", self.ctx.budgets.suspensions));
                }
                ExecOutcome::Failure(reason) if restarts < self.ctx.budgets.failure_restarts => {
                    restarts += 1;
                    self.enter(Phase::Failed, json!({"reason": reason, "terminal": false}));
                    self.enter(Phase::ManagerSelect, json!({}));
                    let mut notes = self.take_failure_notes().map(|n| vec![n]).unwrap_or_default();
                    notes.insert(0, format!("The previous execution failed: {reason}"));
                    failure_report = Some(notes.join("\n"));
                }
                ExecOutcome::Failure(reason) => return Err(reason),
            }
        }
    }

    fn take_failure_notes(&mut self) -> Option<String> {
        (!self.failure_notes.is_empty()).then(|| std::mem::take(&mut self.failure_notes).join("\n"))
    }

    fn listing(&self) -> Vec<ToolSlot> {
        let mut listing = self.snapshot.listing();
        listing.extend(self.locals.iter().map(|a| ToolSlot::new(&a.name, &a.description, &a.input_schema)));
        listing.sort_by(|a, b| a.name.cmp(&b.name));
        listing
    }

    /// Finds a tool by exact name among locals, then the snapshot with
    /// alias fallthrough.
    fn lookup(&self, name: &str) -> Option<(ToolArtifact, Origin, bool)> {
        if let Some(a) = self.locals.iter().find(|a| a.name == name) {
            return Some((a.clone(), Origin::Local, false));
        }
        self.snapshot.resolve(name).ok().map(|r| (r.record.artifact(), Origin::Global, r.aliased))
    }

    fn manager_phase(&mut self, mut failure_report: Option<String>, requests: Option<String>) -> Result<Option<ManagerDecision>, Abort> {
        for attempt in 0..=self.ctx.budgets.manager_replans {
            let slots = Slots::new()
                .text("user_query", self.query.text.as_str())
                .list("tools", &self.listing())
                .opt_text("failure_report", failure_report.as_deref())
                .opt_text("additional_tool_requests", requests.as_deref());
            let prompt = self.ctx.prompts.render(AgentRole::Manager, &slots)?;
            let reply = self.complete(AgentRole::Manager, vec![ChatMessage::user(prompt)], Vec::new())?;
            let decision = match parse_manager(&reply) {
                Ok(d) => d,
                Err(e) => {
                    failure_report = Some(format!("Your previous reply could not be parsed: {}.", e.reason));
                    self.note_replan(attempt, failure_report.as_deref());
                    continue;
                }
            };
            let mut problems = Vec::new();
            let unknown: Vec<&str> = decision
                .required_tool_names
                .iter()
                .map(String::as_str)
                .filter(|n| *n != REQUEST_TOOLS && self.lookup(n).is_none())
                .collect();
            if !unknown.is_empty() {
                problems.push(format!(
                    "Unknown tool names in required_tool_names: {}. Use exact names from Available Tools or request the capability under tool_requests.",
                    unknown.join(", ")
                ));
            }
            for request in &decision.tool_requests {
                if let Err(e) = request.check() {
                    problems.push(format!("Invalid tool request `{}`: {e}.", request.name));
                }
            }
            if !problems.is_empty() {
                failure_report = Some(problems.join("\n"));
                self.note_replan(attempt, failure_report.as_deref());
                continue;
            }
            for name in &decision.required_tool_names {
                if let Some((artifact, origin, _)) = self.lookup(name) {
                    self.bound.insert(artifact.name.clone(), (artifact, origin));
                }
            }
            if !decision.tool_usage_guidance.is_empty() {
                self.guidance = decision.tool_usage_guidance.clone();
            }
            // A request for a name that already exists binds the existing tool.
            let mut fresh = Vec::new();
            for request in decision.tool_requests.iter() {
                match self.lookup(&request.name) {
                    Some((artifact, origin, _)) => {
                        self.bound.insert(artifact.name.clone(), (artifact, origin));
                    }
                    None if fresh.iter().any(|r: &ToolRequest| r.name == request.name) => {}
                    None => fresh.push(request.clone()),
                }
            }
            return Ok(Some(ManagerDecision { tool_requests: fresh, ..decision }));
        }
        Ok(None)
    }

    fn note_replan(&mut self, attempt: u32, report: Option<&str>) {
        self.events.push(EventDraft::new(
            EventKind::Validation,
            json!({"query_id": self.query.id, "stage": "manager", "attempt": attempt + 1, "passed": false, "error": report}),
        ));
    }

    fn synthesize(&mut self, request: &ToolRequest) -> Result<(), Abort> {
        // Synthesize may only proceed to Execute, so a failed model call is
        // recorded as a synthesis failure rather than aborting the job.
        let verdict = self.develop_tool(request).unwrap_or_else(|abort| Err(abort.to_string()));
        match verdict {
            Ok(artifact) => {
                self.sample.c += 1;
                self.bound.insert(artifact.name.clone(), (artifact.clone(), Origin::Local));
                self.locals.push(artifact);
            }
            Err(error) => self.failure_notes.push(format!(
                "Synthesis of tool `{}` failed after {} attempts: {error}. Continue without it or request a different tool.",
                request.name, self.ctx.budgets.developer_retries
            )),
        }
        Ok(())
    }

    /// Developer attempts up to the retry budget; the outer error aborts the
    /// job, the inner one records a synthesis failure.
    fn develop_tool(&mut self, request: &ToolRequest) -> Result<Result<ToolArtifact, String>, Abort> {
        let request_json = serde_json::to_string_pretty(request).expect("request serializes");
        let prompt = self.ctx.prompts.render(AgentRole::ToolDeveloper, &Slots::new().text("tool_request_json", request_json))?;
        let mut messages = vec![ChatMessage::user(prompt)];
        let mut last_error = String::new();
        for attempt in 1..=self.ctx.budgets.developer_retries {
            let reply = self.complete(AgentRole::ToolDeveloper, messages.clone(), Vec::new())?;
            let verdict = parse_single_code_block(&reply)
                .map_err(|e| e.reason)
                .and_then(|source| validate_artifact(&source, request).map_err(|e| e.to_string()));
            self.events.push(EventDraft::new(
                EventKind::Validation,
                json!({
                    "query_id": self.query.id,
                    "stage": "synthesis",
                    "tool": request.name,
                    "attempt": attempt,
                    "passed": verdict.is_ok(),
                    "error": verdict.as_ref().err(),
                    "digest": verdict.as_ref().ok().map(|a| &a.digest),
                }),
            ));
            match verdict {
                Ok(artifact) => return Ok(Ok(artifact)),
                Err(error) => {
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "The tool failed validation: {error}\nReturn the corrected complete tool source in a single code block."
                    )));
                    last_error = error;
                }
            }
        }
        Ok(Err(last_error))
    }

    fn context_summary(&self, suspended_for: Option<&str>) -> String {
        if self.observations.is_empty() && suspended_for.is_none() {
            return String::new();
        }
        let mut out = String::new();
        if let Some(req) = suspended_for {
            out.push_str(&format!("Execution was suspended to request: {req}\n"));
        }
        if !self.observations.is_empty() {
            out.push_str("Tool results gathered so far:\n");
            for o in &self.observations {
                let text: String = o.text.chars().take(2000).collect();
                out.push_str(&format!("- {} {} -> {}: {}\n", o.tool, o.input, o.status, text));
            }
        }
        out.trim_end().to_string()
    }

    fn executor_loop(&mut self) -> Result<ExecOutcome, Abort> {
        let resumed_from = self.phases.iter().rev().skip(1).find(|p| **p == Phase::Suspended || **p == Phase::Failed).copied();
        let summary = match resumed_from {
            Some(Phase::Suspended) => self.context_summary(self.suspended_for.as_deref()),
            Some(_) => self.context_summary(None),
            None => String::new(),
        };
        let tools: Vec<ToolSlot> =
            self.bound.values().map(|(a, _)| ToolSlot::new(&a.name, &a.description, &a.input_schema)).collect();
        let slots = Slots::new()
            .text("user_query", self.query.text.as_str())
            .list("tools", &tools)
            .text("tool_usage_guidance", self.guidance.as_str())
            .text("context_summary", summary);
        let prompt = self.ctx.prompts.render(AgentRole::Executor, &slots)?;
        let mut functions: Vec<FunctionSpec> = self.bound.values().map(|(a, _)| function_spec(a)).collect();
        functions.push(request_tools_spec());
        let mut messages = vec![ChatMessage::system(prompt), ChatMessage::user(self.query.text.clone())];
        for _ in 0..self.ctx.budgets.executor_steps {
            let reply = self.complete(AgentRole::Executor, messages.clone(), functions.clone())?;
            let observation = match parse_executor_action(&reply) {
                Some(Ok(action)) if action.tool == REQUEST_TOOLS => {
                    let requests = match action.input.get("requests") {
                        Some(Value::String(s)) => s.clone(),
                        Some(other) => other.to_string(),
                        None => action.input.to_string(),
                    };
                    return Ok(ExecOutcome::Suspend(requests));
                }
                Some(Ok(action)) => self.call_tool(&action.tool, action.input),
                Some(Err(e)) => format!("Malformed action: {}. Reply with exactly one fenced JSON block {{\"tool\": ..., \"input\": ...}}.", e.reason),
                None => match parse_executor_report(&reply) {
                    Ok(report) => return Ok(ExecOutcome::Report(report)),
                    Err(e) => format!(
                        "Your reply is neither a tool action nor a complete report: {}. Reply with one action block or with all three report sections.",
                        e.reason
                    ),
                },
            };
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(observation));
        }
        Ok(ExecOutcome::Failure(format!("executor step budget ({}) exhausted", self.ctx.budgets.executor_steps)))
    }

    /// Executes one bound tool call and returns the observation text.
    /// Unbound names are rejected without execution and do not count as
    /// invocations.
    fn call_tool(&mut self, name: &str, input: Value) -> String {
        let target = match self.bound.get(name) {
            Some((a, origin)) => Some((a.clone(), *origin, false)),
            None => self
                .snapshot
                .alias_map()
                .get(name)
                .and_then(|canonical| self.bound.get(canonical))
                .map(|(a, origin)| (a.clone(), *origin, true)),
        };
        let Some((artifact, origin, aliased)) = target else {
            self.events.push(EventDraft::new(
                EventKind::Validation,
                json!({"query_id": self.query.id, "stage": "binding", "tool": name, "passed": false, "error": "tool is not bound"}),
            ));
            return format!(
                "Observation: error (UnboundTool): `{name}` is not in the bound tool list. Only call tools listed under Bound Tools, or call {REQUEST_TOOLS} to ask for a missing capability."
            );
        };
        let result = self.ctx.sandbox.invoke(&artifact, &input);
        let tool_tokens = estimate_tokens(&result.output_text);
        self.sample.u += 1;
        let ok = result.status == InvocationStatus::Ok;
        if ok {
            self.sample.successes += 1;
        }
        self.sample.tool_tokens += tool_tokens;
        let stats = self.stats.entry(artifact.name.clone()).or_default();
        stats.add(&ToolStats { invocations: 1, successes: u64::from(ok), tool_output_tokens: tool_tokens });
        self.events.push(EventDraft::new(
            EventKind::Invocation,
            json!({
                "query_id": self.query.id,
                "tool": name,
                "resolved": artifact.name,
                "aliased": aliased,
                "origin": match origin { Origin::Global => "global", Origin::Local => "local" },
                "input": input,
                "status": result.status.as_str(),
                "error_kind": (!ok).then(|| result.payload.get("kind").cloned()).flatten(),
                "tool_tokens": tool_tokens,
                "output_digest": text_digest(&result.output_text),
            }),
        ));
        let observation = format!("Observation from `{name}` ({}):\n{}", result.status.as_str(), result.output_text);
        self.observations.push(Observation { tool: name.to_string(), input, status: result.status.as_str(), text: result.output_text });
        observation
    }

    fn integrate(&mut self, report: &ExecutorReport) -> Result<Option<FinalAnswer>, Abort> {
        let prompt = self.ctx.prompts.render(AgentRole::Integrator, &Slots::new().text("user_query", self.query.text.as_str()))?;
        let mut messages = vec![ChatMessage::system(prompt), ChatMessage::user(report.to_markdown())];
        for _ in 0..=self.ctx.budgets.integrator_retries {
            let reply = self.complete(AgentRole::Integrator, messages.clone(), Vec::new())?;
            match parse_final_answer(&reply) {
                Ok(answer) => return Ok(Some(answer)),
                Err(e) => {
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "Your reply could not be parsed: {}. Respond with only the JSON block in the Answer Format.",
                        e.reason
                    )));
                }
            }
        }
        Ok(None)
    }

    fn finish(mut self, answer: FinalAnswer, completed: bool) -> JobOutcome {
        let next_step = self.snapshot.step() + 1;
        let local_tools = self
            .locals
            .iter()
            .map(|a| {
                let mut record =
                    ToolRecord::from_artifact(a, Provenance::Synthesized { step: next_step, query_id: self.query.id.clone() });
                record.stats = self.stats.remove(&a.name).unwrap_or_default();
                record
            })
            .collect();
        JobOutcome {
            query_id: self.query.id.clone(),
            answer,
            completed,
            local_tools,
            sample: self.sample,
            global_stats: self.stats,
            phases: self.phases,
            listing_digest: self.snapshot.listing_digest(),
            events: self.events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_table() {
        use Phase::*;
        assert!(is_legal_transition(None, ManagerSelect));
        assert!(!is_legal_transition(None, Execute));
        assert!(is_legal_transition(Some(ManagerSelect), Synthesize));
        assert!(is_legal_transition(Some(ManagerSelect), Execute));
        assert!(!is_legal_transition(Some(Synthesize), ManagerSelect));
        assert!(is_legal_transition(Some(Execute), Suspended));
        assert!(is_legal_transition(Some(Suspended), ManagerSelect));
        assert!(!is_legal_transition(Some(Suspended), Execute));
        assert!(is_legal_transition(Some(Integrate), Done));
        assert!(!is_legal_transition(Some(Done), ManagerSelect));
        assert!(is_legal_transition(Some(Failed), ManagerSelect));
    }

    #[test]
    fn phase_names_round_trip() {
        for p in [Phase::ManagerSelect, Phase::Synthesize, Phase::Execute, Phase::Suspended, Phase::Integrate, Phase::Done, Phase::Failed] {
            assert_eq!(Phase::parse(p.as_str()), Some(p));
            assert_eq!(serde_json::to_value(p).unwrap(), Value::String(p.as_str().into()));
        }
    }

    #[test]
    fn default_budgets() {
        let b = Budgets::default();
        assert_eq!((b.executor_steps, b.developer_retries, b.manager_replans, b.suspensions), (30, 3, 2, 3));
        assert!(b.invalid_fields().is_empty());
        assert_eq!(Budgets { executor_steps: 0, ..b }.invalid_fields(), ["executor_steps"]);
    }
}
