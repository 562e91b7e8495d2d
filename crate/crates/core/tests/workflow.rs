//! Single-query workflow runs driven by scripted model replies.

use std::sync::Arc;

use serde_json::{json, Value};

use insitu::gateway::{ChatExchange, Gateway, ScriptEntry, ScriptedProvider};
use insitu::registry::RegistrySnapshot;
use insitu::testkit::{self, Capability, Capturing, Rig};
use insitu::trace::EventKind;
use insitu::workflow::{is_legal_transition, run_query, Budgets, JobOutcome, Phase, QueryInput, WorkflowContext};
use insitu::AgentRole;

struct Script(Vec<(AgentRole, String)>);

impl Script {
    fn new() -> Self {
        Script(Vec::new())
    }

    fn say(mut self, role: AgentRole, text: impl Into<String>) -> Self {
        self.0.push((role, text.into()));
        self
    }

    fn manager(self, required: &[&str], requests: Vec<Value>) -> Self {
        let body = json!({"required_tool_names": required, "tool_usage_guidance": "", "tool_requests": requests});
        self.say(AgentRole::Manager, format!("```json\n{body}\n```"))
    }

    fn call(self, tool: &str, input: Value) -> Self {
        self.say(AgentRole::Executor, format!("```json\n{}\n```", json!({"tool": tool, "input": input})))
    }

    fn report(self, conclusion: &str) -> Self {
        self.say(
            AgentRole::Executor,
            format!(
                "## Reasoning & Plan\nUse the tool.\n\n## Key Findings & Evidence\n* The tool returned {conclusion}.\n\n## Final Conclusion\n{conclusion}\n"
            ),
        )
    }

    fn answer(self, answer: &str) -> Self {
        let body = json!({"final_answer": answer, "reasoning_summary": format!("The tool output in the key findings gives {answer}.")});
        self.say(AgentRole::Integrator, format!("```json\n{body}\n```"))
    }

    fn code(self, name: &str, cap: Capability) -> Self {
        self.say(AgentRole::ToolDeveloper, format!("```python\n{}```", testkit::capability_source(name, cap)))
    }

    fn provider(self) -> Capturing<ScriptedProvider> {
        let mut counters = std::collections::BTreeMap::new();
        let entries = self
            .0
            .into_iter()
            .map(|(role, text)| {
                let n = counters.entry(role).or_insert(0u64);
                *n += 1;
                ScriptEntry::by_sequence(role, *n - 1, text)
            })
            .collect();
        Capturing::new(ScriptedProvider::new(entries).unwrap())
    }
}

fn request(name: &str, cap: Capability) -> Value {
    json!({
        "name": name,
        "description": testkit::tool_description(name),
        "input_schema": cap.input_schema(),
        "output_schema": cap.output_schema(),
    })
}

fn with_count_words() -> RegistrySnapshot {
    RegistrySnapshot::from_records(vec![testkit::capability_record("count_words", Capability::WordCount, 0, "seed")]).unwrap()
}

struct Ran {
    outcome: JobOutcome,
    exchanges: Vec<ChatExchange>,
}

impl Ran {
    fn calls(&self, role: AgentRole) -> Vec<&ChatExchange> {
        self.exchanges.iter().filter(|e| e.agent_role == role).collect()
    }

    fn events(&self, kind: EventKind) -> Vec<&Value> {
        self.outcome.events.iter().filter(|e| e.kind == kind).map(|e| &e.payload).collect()
    }
}

fn run(rig: &Rig, script: Script, snapshot: &RegistrySnapshot, query: &str, budgets: Budgets) -> Ran {
    let provider = Arc::new(script.provider());
    let gateway = Gateway::new(provider.clone());
    let ctx = WorkflowContext { gateway: &gateway, sandbox: &rig.sandbox, prompts: &rig.prompts, budgets: &budgets };
    let outcome = run_query(&QueryInput::new("q0001", query), snapshot, ctx);
    check_invariants(&outcome);
    let exchanges = provider.exchanges();
    Ran { outcome, exchanges }
}

/// Phase soundness, accounting exactness and binding closure.
fn check_invariants(o: &JobOutcome) {
    let mut prev = None;
    for p in &o.phases {
        assert!(is_legal_transition(prev, *p), "illegal {prev:?} -> {p:?} in {:?}", o.phases);
        prev = Some(*p);
    }
    let invocations: Vec<&Value> = o.events.iter().filter(|e| e.kind == EventKind::Invocation).map(|e| &e.payload).collect();
    assert_eq!(o.sample.u, invocations.len() as u64, "u counts invocation events");
    assert_eq!(o.sample.successes, invocations.iter().filter(|p| p["status"] == "ok").count() as u64);
    let passed = o
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Validation && e.payload["stage"] == "synthesis" && e.payload["passed"] == json!(true))
        .count();
    assert_eq!(o.sample.c, passed as u64, "c counts passing syntheses");
    assert_eq!(o.local_tools.len(), passed);
    assert!(invocations.iter().all(|p| p["resolved"].is_string()), "every invocation resolved a bound tool");
}

#[test]
fn reuse_existing_tool_once() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"text": "a b c"}))
        .report("3")
        .answer("3");
    let ran = run(&rig, script, &with_count_words(), "Count the words: a b c", Budgets::default());
    let o = &ran.outcome;
    assert!(o.completed);
    assert_eq!(o.answer.final_answer, "3");
    assert!(o.answer.reasoning_summary.contains("3"));
    assert_eq!((o.sample.c, o.sample.u, o.sample.successes), (0, 1, 1));
    assert_eq!(o.phases, [Phase::ManagerSelect, Phase::Execute, Phase::Integrate, Phase::Done]);
    assert_eq!(o.global_stats["count_words"].invocations, 1);
    assert!(ran.calls(AgentRole::ToolDeveloper).is_empty());
}

#[test]
fn synthesized_tool_used_twice() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&[], vec![request("count_words", Capability::WordCount)])
        .code("count_words", Capability::WordCount)
        .call("count_words", json!({"text": "one two"}))
        .call("count_words", json!({"text": "three"}))
        .report("3")
        .answer("3");
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Count the words in both parts", Budgets::default());
    let o = &ran.outcome;
    assert!(o.completed);
    assert_eq!((o.sample.c, o.sample.u), (1, 2));
    assert_eq!(o.phases, [Phase::ManagerSelect, Phase::Synthesize, Phase::Execute, Phase::Integrate, Phase::Done]);
    assert_eq!(o.local_tools[0].name, "count_words");
    assert_eq!(o.local_tools[0].stats.invocations, 2);
    assert!(o.global_stats.is_empty());
    assert_eq!(ran.calls(AgentRole::ToolDeveloper).len(), 1);
}

#[test]
fn zero_start_manager_sees_empty_listing_and_requests_two_tools() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&[], vec![request("count_words", Capability::WordCount), request("reverse_text", Capability::Reverse)])
        .code("count_words", Capability::WordCount)
        .code("reverse_text", Capability::Reverse)
        .report("done")
        .answer("done");
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Count and reverse", Budgets::default());
    let manager_prompt = &ran.calls(AgentRole::Manager)[0].messages[0].content;
    let tools = manager_prompt.split("# Available Tools").nth(1).unwrap().split("# Analysis Instructions").next().unwrap();
    assert!(!tools.contains("- **"), "zero-start listing must be empty: {tools}");
    assert_eq!(ran.outcome.sample.c, 2);
    assert_eq!(ran.calls(AgentRole::ToolDeveloper).len(), 2);
}

#[test]
fn suspension_returns_to_manager_with_the_request() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&[], vec![])
        .call("request_tools", json!({"requests": "a tool that counts words in text"}))
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"text": "x y"}))
        .report("2")
        .answer("2");
    let ran = run(&rig, script, &with_count_words(), "Count the words: x y", Budgets::default());
    let o = &ran.outcome;
    assert!(o.completed);
    assert_eq!(
        o.phases,
        [Phase::ManagerSelect, Phase::Execute, Phase::Suspended, Phase::ManagerSelect, Phase::Execute, Phase::Integrate, Phase::Done]
    );
    let second = &ran.calls(AgentRole::Manager)[1].messages[0].content;
    assert!(second.contains("a tool that counts words in text"), "{second}");
    let resumed = &ran.calls(AgentRole::Executor)[1].messages[0].content;
    assert!(resumed.contains("## Context Summary") && resumed.contains("suspended to request: a tool that counts words"), "{resumed}");
    assert_eq!(o.sample.u, 1, "the suspension signal is not an invocation");
}

#[test]
fn suspensions_are_bounded() {
    let rig = Rig::new();
    let budgets = Budgets { suspensions: 3, failure_restarts: 0, ..Budgets::default() };
    let mut script = Script::new();
    for _ in 0..6 {
        script = script.manager(&[], vec![]).call("request_tools", json!({"requests": "anything"}));
    }
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Impossible", budgets);
    let o = &ran.outcome;
    assert!(!o.completed);
    let suspended = o.phases.iter().filter(|p| **p == Phase::Suspended).count();
    let selects = o.phases.iter().filter(|p| **p == Phase::ManagerSelect).count();
    assert_eq!(suspended, 3);
    assert_eq!(selects, 1 + suspended, "each suspension adds exactly one manager entry");
    assert_eq!(o.answer.final_answer, "The task is not completable.");
    assert_eq!(o.phases.last(), Some(&Phase::Failed));
}

#[test]
fn unknown_tool_name_triggers_replan_with_the_bad_name() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["websearch"], vec![])
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"text": "a"}))
        .report("1")
        .answer("1");
    let ran = run(&rig, script, &with_count_words(), "Count the words: a", Budgets::default());
    let managers = ran.calls(AgentRole::Manager);
    assert_eq!(managers.len(), 2);
    assert!(!managers[0].messages[0].content.contains("websearch"));
    assert!(managers[1].messages[0].content.contains("websearch"));
    assert!(ran.outcome.completed);
    let replans = ran.events(EventKind::Validation).into_iter().filter(|p| p["stage"] == "manager").count();
    assert_eq!(replans, 1);
}

#[test]
fn manager_replan_budget_exhaustion_fails_the_job() {
    let rig = Rig::new();
    let mut script = Script::new();
    for _ in 0..3 {
        script = script.manager(&["websearch"], vec![]);
    }
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Search", Budgets { manager_replans: 2, ..Budgets::default() });
    assert_eq!(ran.calls(AgentRole::Manager).len(), 3);
    assert!(!ran.outcome.completed);
}

#[test]
fn developer_retry_sees_the_first_error() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&[], vec![request("count_words", Capability::WordCount)])
        .say(AgentRole::ToolDeveloper, "```python\ndef run(input):\n    return None\n```")
        .code("count_words", Capability::WordCount)
        .call("count_words", json!({"text": "a b"}))
        .report("2")
        .answer("2");
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Count the words: a b", Budgets::default());
    let devs = ran.calls(AgentRole::ToolDeveloper);
    assert_eq!(devs.len(), 2);
    let retry = devs[1].messages.last().unwrap();
    assert!(retry.content.starts_with("The tool failed validation:"), "{}", retry.content);
    let first_error = ran
        .events(EventKind::Validation)
        .into_iter()
        .find(|p| p["stage"] == "synthesis" && p["passed"] == json!(false))
        .and_then(|p| p["error"].as_str().map(str::to_string))
        .unwrap();
    assert!(retry.content.contains(&first_error));
    assert_eq!(ran.outcome.sample.c, 1);
    assert!(ran.outcome.completed);
}

#[test]
fn developer_budget_exhaustion_is_a_synthesis_failure() {
    let rig = Rig::new();
    let bad = "```python\nprint('no tool here')\n```";
    let script = Script::new()
        .manager(&[], vec![request("count_words", Capability::WordCount)])
        .say(AgentRole::ToolDeveloper, bad)
        .say(AgentRole::ToolDeveloper, bad)
        .say(AgentRole::ToolDeveloper, bad)
        .report("The task is not completable: no tool could be built.")
        .answer("The task is not completable: no tool could be built.");
    let ran = run(&rig, script, &RegistrySnapshot::empty(), "Count the words: a", Budgets { developer_retries: 3, ..Budgets::default() });
    assert_eq!(ran.calls(AgentRole::ToolDeveloper).len(), 3);
    assert_eq!(ran.outcome.sample.c, 0);
    assert!(ran.outcome.local_tools.is_empty());
    let failures = ran.events(EventKind::Validation).into_iter().filter(|p| p["stage"] == "synthesis").count();
    assert_eq!(failures, 3);
}

#[test]
fn unbound_call_is_an_error_observation_without_invocation() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["count_words"], vec![])
        .call("websearch", json!({"query": "x"}))
        .call("count_words", json!({"text": "a b c d"}))
        .report("4")
        .answer("4");
    let ran = run(&rig, script, &with_count_words(), "Count the words: a b c d", Budgets::default());
    assert_eq!(ran.outcome.sample.u, 1, "the unbound call is not counted");
    let second = &ran.calls(AgentRole::Executor)[1];
    assert!(second.messages.last().unwrap().content.contains("UnboundTool"));
    assert!(ran.outcome.completed);
}

#[test]
fn tool_failures_are_observations() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"words": "wrong field"}))
        .call("count_words", json!({"text": "fixed"}))
        .report("1")
        .answer("1");
    let ran = run(&rig, script, &with_count_words(), "Count the words: fixed", Budgets::default());
    let o = &ran.outcome;
    assert_eq!((o.sample.u, o.sample.successes), (2, 1));
    let observed = &ran.calls(AgentRole::Executor)[1].messages.last().unwrap().content;
    assert!(observed.contains("(tool_error)") && observed.contains("ValidationError"), "{observed}");
    assert!(o.completed);
}

#[test]
fn integrator_without_json_retries_then_fails() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"text": "a"}))
        .report("1")
        .say(AgentRole::Integrator, "The answer is 1.")
        .say(AgentRole::Integrator, "Still no JSON, sorry.");
    let budgets = Budgets { integrator_retries: 1, failure_restarts: 0, ..Budgets::default() };
    let ran = run(&rig, script, &with_count_words(), "Count the words: a", budgets);
    assert_eq!(ran.calls(AgentRole::Integrator).len(), 2);
    assert!(!ran.outcome.completed);
    assert_eq!(ran.outcome.phases.last(), Some(&Phase::Failed));
}

#[test]
fn executor_step_budget_bounds_the_loop() {
    let rig = Rig::new();
    let mut script = Script::new().manager(&["count_words"], vec![]);
    for _ in 0..3 {
        script = script.say(AgentRole::Executor, "thinking without acting");
    }
    let budgets = Budgets { executor_steps: 3, failure_restarts: 0, ..Budgets::default() };
    let ran = run(&rig, script, &with_count_words(), "Count the words: a", budgets);
    assert_eq!(ran.calls(AgentRole::Executor).len(), 3);
    assert!(!ran.outcome.completed);
}

#[test]
fn failed_execution_restarts_from_the_manager_once() {
    let rig = Rig::new();
    let mut script = Script::new().manager(&["count_words"], vec![]);
    script = script.say(AgentRole::Executor, "no action").say(AgentRole::Executor, "still no action");
    script = script.manager(&["count_words"], vec![]).call("count_words", json!({"text": "a b"})).report("2").answer("2");
    let budgets = Budgets { executor_steps: 2, failure_restarts: 1, ..Budgets::default() };
    let ran = run(&rig, script, &with_count_words(), "Count the words: a b", budgets);
    let o = &ran.outcome;
    assert!(o.completed, "{:?}", o.phases);
    assert!(o.phases.windows(2).any(|w| w == [Phase::Failed, Phase::ManagerSelect]));
    assert!(ran.calls(AgentRole::Manager)[1].messages[0].content.contains("The previous execution failed"));
}

#[test]
fn alias_names_resolve_to_the_master() {
    let rig = Rig::new();
    let master = testkit::capability_record("count_words", Capability::WordCount, 0, "seed");
    let tally = testkit::capability_record("tally_words", Capability::WordCount, 0, "seed");
    let snapshot = RegistrySnapshot::empty()
        .commit(insitu::registry::CommitDelta {
            new_tools: vec![master],
            aliases: [("tally_words".to_string(), "count_words".to_string())].into(),
            retired_candidates: vec![tally],
        })
        .unwrap();
    let script = Script::new()
        .manager(&["tally_words"], vec![])
        .call("tally_words", json!({"text": "a b"}))
        .report("2")
        .answer("2");
    let ran = run(&rig, script, &snapshot, "Tally the words: a b", Budgets::default());
    let inv = &ran.events(EventKind::Invocation)[0];
    assert_eq!(inv["resolved"], "count_words");
    assert_eq!(ran.outcome.global_stats["count_words"].invocations, 1);
}

#[test]
fn every_exchange_is_traced() {
    let rig = Rig::new();
    let script = Script::new()
        .manager(&["count_words"], vec![])
        .call("count_words", json!({"text": "a"}))
        .report("1")
        .answer("1");
    let ran = run(&rig, script, &with_count_words(), "Count the words: a", Budgets::default());
    let traced = ran.events(EventKind::LlmExchange);
    assert_eq!(traced.len(), ran.exchanges.len());
    for (payload, exchange) in traced.iter().zip(&ran.exchanges) {
        assert_eq!(payload["exchange_digest"], json!(exchange.digest()));
        assert_eq!(payload["role"], json!(exchange.agent_role.as_str()));
    }
    let first_phase = ran.events(EventKind::Phase)[0];
    assert_eq!(first_phase["listing_digest"], json!(with_count_words().listing_digest()));
}
