//! The barrier step: cluster the candidate set, merge multi-member
//! clusters, and produce the delta committed as the next snapshot.
//!
//! Candidates are the snapshot's live tools plus every local tool of the
//! batch. An accepted plan partitions the candidates exactly; anything else
//! is retried once and then replaced by the all-singleton plan, which is
//! plain union.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::Serialize;
use serde_json::json;

use crate::gateway::{AgentRole, ChatExchange, ChatMessage, Gateway};
use crate::prompts::{parse_cluster_plan, parse_single_code_block, tool_name_re, ClusterPlan, MergeMember, PromptSuite, Slots, ToolSlot};
use crate::registry::{CommitDelta, Provenance, RegistrySnapshot, ToolRecord};
use crate::sandbox::{parse_meta, source_digest, validate_source};
use crate::trace::{EventDraft, EventKind};

/// How one cluster was resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ClusterOutcome {
    Passthrough { members: Vec<String> },
    /// Pure-global cluster left untouched.
    Protected { members: Vec<String> },
    Merged { members: Vec<String>, master: String },
    Fallback { members: Vec<String>, survivor: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    /// No local tools: nothing to absorb, no model call.
    Empty,
    Aggregator,
    AggregatorRetry,
    SingletonFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbResult {
    pub delta: CommitDelta,
    pub plan: Vec<Vec<String>>,
    pub plan_source: PlanSource,
    pub outcomes: Vec<ClusterOutcome>,
    /// Local renames applied before clustering, original to new.
    pub renamed: Vec<(String, String)>,
    pub events: Vec<EventDraft>,
}

#[derive(Debug, Clone, Copy)]
pub struct AbsorbOptions {
    /// Allow merging clusters made only of snapshot tools.
    pub reconsolidate_globals: bool,
    /// Extra aggregator attempts after an invalid plan.
    pub aggregator_retries: u32,
}

impl Default for AbsorbOptions {
    fn default() -> Self {
        Self { reconsolidate_globals: false, aggregator_retries: 1 }
    }
}

/// Checks that `plan` covers every candidate exactly once and nothing else.
pub fn validate_partition(plan: &ClusterPlan, candidates: &BTreeSet<String>) -> Result<Vec<Vec<String>>, String> {
    let mut seen = BTreeSet::new();
    let mut problems = Vec::new();
    for cluster in &plan.clusters {
        if cluster.tool_names.is_empty() {
            problems.push(format!("cluster `{}` is empty", cluster.cluster_id));
        }
        for name in &cluster.tool_names {
            if !candidates.contains(name) {
                problems.push(format!("`{name}` is not an input tool"));
            } else if !seen.insert(name.clone()) {
                problems.push(format!("`{name}` appears more than once"));
            }
        }
    }
    let missing: Vec<&str> = candidates.iter().filter(|c| !seen.contains(*c)).map(String::as_str).collect();
    if !missing.is_empty() {
        problems.push(format!("missing tools: {}", missing.join(", ")));
    }
    if problems.is_empty() {
        Ok(plan.clusters.iter().map(|c| c.tool_names.clone()).collect())
    } else {
        Err(problems.join("; "))
    }
}

/// The plan that keeps every candidate separate.
pub fn singleton_plan(candidates: &BTreeSet<String>) -> Vec<Vec<String>> {
    candidates.iter().map(|c| vec![c.clone()]).collect()
}

/// Rewrites the `name` entry of `__TOOL_META__`. `None` if the source does
/// not carry `old` as a plain literal there.
pub fn rename_source(source: &str, old: &str, new: &str) -> Option<String> {
    let meta_start = source.find("__TOOL_META__")?;
    let pattern = format!(r#"(["']name["']\s*:\s*)(["']){}(["'])"#, regex::escape(old));
    let re = Regex::new(&pattern).ok()?;
    let tail = &source[meta_start..];
    let m = re.captures(tail)?;
    let whole = m.get(0)?;
    let replaced = format!("{}{}{}{}", &m[1], &m[2], new, &m[3]);
    let out = format!("{}{}{}", &source[..meta_start + whole.start()], replaced, &tail[whole.end()..]);
    (parse_meta(&out).ok()?.name == new).then_some(out)
}

fn fresh_name(base: &str, taken: &BTreeSet<String>, first: u32, sep: &str) -> String {
    (first..).map(|i| format!("{base}{sep}{i}")).find(|n| !taken.contains(n)).expect("unbounded suffixes")
}

struct Absorber<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptSuite,
    options: AbsorbOptions,
    batch: u64,
    events: Vec<EventDraft>,
}

/// Runs the barrier step for one batch.
///
/// `locals` are the validated tools of every job in query order, each with
/// the usage its job recorded.
pub fn absorb(
    global: &RegistrySnapshot,
    locals: Vec<ToolRecord>,
    gateway: &Gateway,
    prompts: &PromptSuite,
    options: AbsorbOptions,
    batch: u64,
) -> AbsorbResult {
    let mut a = Absorber { gateway, prompts, options, batch, events: Vec::new() };
    a.run(global, locals)
}

impl Absorber<'_> {
    fn run(&mut self, global: &RegistrySnapshot, locals: Vec<ToolRecord>) -> AbsorbResult {
        let (locals, renamed) = disambiguate(global, locals);
        if locals.is_empty() {
            return self.finish(
                CommitDelta::default(),
                Vec::new(),
                PlanSource::Empty,
                Vec::new(),
                renamed,
                global,
                &locals,
            );
        }
        let candidates: BTreeSet<String> = global.names().into_iter().chain(locals.iter().map(|l| l.name.clone())).collect();
        let (plan, source, suggestions) = self.cluster(global, &locals, &candidates);

        let local_by_name: BTreeMap<&str, &ToolRecord> = locals.iter().map(|l| (l.name.as_str(), l)).collect();
        let mut delta = CommitDelta::default();
        let mut outcomes = Vec::new();
        // Names that survive into the next snapshot, for master collision checks.
        let mut taken: BTreeSet<String> = candidates.clone();
        taken.extend(global.alias_map().keys().cloned());
        for (members, suggestion) in plan.iter().zip(&suggestions) {
            let has_local = members.iter().any(|m| local_by_name.contains_key(m.as_str()));
            if members.len() == 1 {
                if let Some(l) = local_by_name.get(members[0].as_str()) {
                    delta.new_tools.push((*l).clone());
                }
                outcomes.push(ClusterOutcome::Passthrough { members: members.clone() });
                continue;
            }
            if !has_local && !self.options.reconsolidate_globals {
                outcomes.push(ClusterOutcome::Protected { members: members.clone() });
                continue;
            }
            let records: Vec<ToolRecord> = members
                .iter()
                .map(|m| local_by_name.get(m.as_str()).map(|l| (*l).clone()).unwrap_or_else(|| global.get(m).expect("candidate").clone()))
                .collect();
            let outcome = self.merge_cluster(&records, suggestion.as_deref(), &mut taken, &mut delta, global);
            outcomes.push(outcome);
        }
        self.finish(delta, plan, source, outcomes, renamed, global, &locals)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        delta: CommitDelta,
        plan: Vec<Vec<String>>,
        plan_source: PlanSource,
        outcomes: Vec<ClusterOutcome>,
        renamed: Vec<(String, String)>,
        global: &RegistrySnapshot,
        locals: &[ToolRecord],
    ) -> AbsorbResult {
        self.events.push(EventDraft::new(
            EventKind::Absorb,
            json!({
                "batch": self.batch,
                "globals": global.len(),
                "locals": locals.iter().map(|l| &l.name).collect::<Vec<_>>(),
                "renamed": renamed,
                "plan_source": plan_source,
                "plan": plan,
                "outcomes": outcomes,
                "aliases": delta.aliases,
            }),
        ));
        AbsorbResult { delta, plan, plan_source, outcomes, renamed, events: std::mem::take(&mut self.events) }
    }

    fn complete(&mut self, role: AgentRole, messages: Vec<ChatMessage>) -> Option<String> {
        let exchange = ChatExchange::new(role, messages).ok()?;
        let digest = exchange.digest();
        match self.gateway.complete(exchange) {
            Ok(r) => {
                self.events.push(EventDraft::new(
                    EventKind::LlmExchange,
                    json!({
                        "batch": self.batch,
                        "role": role.as_str(),
                        "exchange_digest": digest,
                        "response_digest": hex::encode(<sha2::Sha256 as sha2::Digest>::digest(r.text.as_bytes())),
                        "prompt_tokens": r.prompt_tokens,
                        "completion_tokens": r.completion_tokens,
                        "provider": r.provider_id,
                    }),
                ));
                Some(r.text)
            }
            Err(e) => {
                self.events.push(EventDraft::new(
                    EventKind::LlmExchange,
                    json!({"batch": self.batch, "role": role.as_str(), "exchange_digest": digest, "error": e.to_string()}),
                ));
                None
            }
        }
    }

    /// Returns the accepted plan with each cluster's suggested master name.
    fn cluster(
        &mut self,
        global: &RegistrySnapshot,
        locals: &[ToolRecord],
        candidates: &BTreeSet<String>,
    ) -> (Vec<Vec<String>>, PlanSource, Vec<Option<String>>) {
        let mut listing: Vec<ToolSlot> = global.listing();
        listing.extend(locals.iter().map(ToolRecord::slot));
        listing.sort_by(|a, b| a.name.cmp(&b.name));
        let Ok(prompt) = self.prompts.render(AgentRole::Aggregator, &Slots::new().list("tools", &listing)) else {
            return fallback(candidates);
        };
        let mut messages = vec![ChatMessage::user(prompt)];
        for attempt in 0..=self.options.aggregator_retries {
            let Some(reply) = self.complete(AgentRole::Aggregator, messages.clone()) else {
                return fallback(candidates);
            };
            let verdict = parse_cluster_plan(&reply)
                .map_err(|e| e.reason)
                .and_then(|plan| validate_partition(&plan, candidates).map(|clusters| (plan, clusters)));
            self.events.push(EventDraft::new(
                EventKind::Validation,
                json!({
                    "batch": self.batch,
                    "stage": "partition",
                    "attempt": attempt + 1,
                    "passed": verdict.is_ok(),
                    "error": verdict.as_ref().err(),
                }),
            ));
            match verdict {
                Ok((plan, clusters)) => {
                    let suggestions = plan.clusters.iter().map(|c| Some(c.suggested_master_tool_name.clone())).collect();
                    let source = if attempt == 0 { PlanSource::Aggregator } else { PlanSource::AggregatorRetry };
                    return (clusters, source, suggestions);
                }
                Err(problem) => {
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "The cluster plan is invalid: {problem}. Every input tool must appear in exactly one cluster. Output the corrected JSON object."
                    )));
                }
            }
        }
        fallback(candidates)
    }

    fn merge_cluster(
        &mut self,
        members: &[ToolRecord],
        suggestion: Option<&str>,
        taken: &mut BTreeSet<String>,
        delta: &mut CommitDelta,
        global: &RegistrySnapshot,
    ) -> ClusterOutcome {
        let member_names: Vec<String> = members.iter().map(|m| m.name.clone()).collect();
        let survivor = members
            .iter()
            .max_by(|a, b| a.stats.invocations.cmp(&b.stats.invocations).then_with(|| b.name.cmp(&a.name)))
            .expect("non-empty cluster");
        let mut master = match suggestion {
            Some(s) if tool_name_re().is_match(s) => s.to_string(),
            _ => survivor.name.clone(),
        };
        if taken.contains(&master) && !member_names.contains(&master) {
            master = fresh_name(&master, taken, 2, "_v");
        }
        let sources: Vec<MergeMember> =
            members.iter().enumerate().map(|(i, m)| MergeMember { idx: i + 1, name: m.name.clone(), code: m.source.clone() }).collect();
        let verdict = match self.prompts.render(AgentRole::Merger, &Slots::new().list("tools", &sources).text("suggest_name", master.as_str())) {
            Err(e) => Err(e.to_string()),
            Ok(prompt) => match self.complete(AgentRole::Merger, vec![ChatMessage::user(prompt)]) {
                None => Err("merger call failed".to_string()),
                Some(reply) => parse_single_code_block(&reply)
                    .map_err(|e| e.reason)
                    .and_then(|source| validate_source(&source, Some(&master)).map_err(|e| e.to_string())),
            },
        };
        self.events.push(EventDraft::new(
            EventKind::Validation,
            json!({
                "batch": self.batch,
                "stage": "merge",
                "tool": master,
                "members": member_names,
                "passed": verdict.is_ok(),
                "error": verdict.as_ref().err(),
            }),
        ));
        let step = global.step() + 1;
        match verdict {
            Ok(artifact) => {
                let record = ToolRecord::from_artifact(&artifact, Provenance::Merged { step, member_names: member_names.clone() });
                taken.insert(master.clone());
                self.retire(members, &master, delta, global);
                delta.new_tools.push(record);
                ClusterOutcome::Merged { members: member_names, master }
            }
            Err(reason) => {
                let survivor_name = survivor.name.clone();
                if global.get(&survivor_name).is_none() {
                    delta.new_tools.push(survivor.clone());
                }
                let others: Vec<ToolRecord> = members.iter().filter(|m| m.name != survivor_name).cloned().collect();
                self.retire(&others, &survivor_name, delta, global);
                ClusterOutcome::Fallback { members: member_names, survivor: survivor_name, reason }
            }
        }
    }

    /// Aliases `members` to `target`; locals are kept as retired records so
    /// their usage stays counted.
    fn retire(&self, members: &[ToolRecord], target: &str, delta: &mut CommitDelta, global: &RegistrySnapshot) {
        for m in members {
            delta.aliases.insert(m.name.clone(), target.to_string());
            if global.get(&m.name).is_none() {
                delta.retired_candidates.push(m.clone());
            }
        }
    }
}

fn fallback(candidates: &BTreeSet<String>) -> (Vec<Vec<String>>, PlanSource, Vec<Option<String>>) {
    (singleton_plan(candidates), PlanSource::SingletonFallback, vec![None; candidates.len()])
}

/// Gives every local a name distinct from all snapshot names, aliases and
/// earlier locals. Byte-identical duplicates are folded into the first
/// copy with their usage added.
fn disambiguate(global: &RegistrySnapshot, locals: Vec<ToolRecord>) -> (Vec<ToolRecord>, Vec<(String, String)>) {
    let mut taken: BTreeSet<String> = global.names().into_iter().collect();
    taken.extend(global.alias_map().keys().cloned());
    let mut out: Vec<ToolRecord> = Vec::new();
    let mut renamed = Vec::new();
    for mut local in locals {
        if let Some(existing) = out.iter_mut().find(|o| o.digest == local.digest) {
            existing.stats.add(&local.stats);
            continue;
        }
        if taken.contains(&local.name) {
            let new_name = fresh_name(&local.name, &taken, 2, "_");
            match rename_source(&local.source, &local.name, &new_name) {
                Some(source) => {
                    renamed.push((local.name.clone(), new_name.clone()));
                    local.digest = source_digest(&source);
                    local.source = source;
                    local.name = new_name;
                }
                None => {
                    log::warn!("dropping local tool `{}`: its name cannot be rewritten", local.name);
                    continue;
                }
            }
        }
        taken.insert(local.name.clone());
        out.push(local);
    }
    (out, renamed)
}
