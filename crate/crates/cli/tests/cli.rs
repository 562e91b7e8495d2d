//! The `insitu` binary, end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use insitu::evolution::{BatchOutcome, EngineConfig, QueryInput};
use insitu::gateway::RecordingProvider;
use insitu::registry::{RegistrySnapshot, ToolStats};
use insitu::sandbox::default_python;
use insitu::testkit::{self, Capability, FakeLlm, Rig};
use insitu::trace::{read_trace, EventKind, LogicalClock, TraceWriter};
use insitu::Gateway;

fn insitu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_insitu"))
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Records the rule-based fake model on `queries` at batch size `b`, so
/// the binary can replay the same exchanges from a script.
fn record_script(queries: &[QueryInput], b: usize, path: &Path) {
    let rig = Rig::new();
    let recorder = Arc::new(RecordingProvider::new(FakeLlm::default()));
    let config = EngineConfig { batch_size: b, max_workers: 4, ..EngineConfig::default() };
    let trace = Arc::new(TraceWriter::in_memory(Box::new(LogicalClock::default())));
    let engine = rig.engine(Arc::new(Gateway::new(recorder.clone())), config, trace, RegistrySnapshot::empty());
    let mut sink = |_: &BatchOutcome, _: usize| -> Result<(), String> { Ok(()) };
    engine.run_stream(queries, 0, &AtomicBool::new(false), &mut sink).unwrap();
    recorder.save(path).unwrap();
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(queries: &[QueryInput], b: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        testkit::write_harness(&root.join("harness"));
        record_script(queries, b, &root.join("script.json"));
        let stream: String = queries.iter().map(|q| format!("{}\n", json!({"id": q.id, "query": q.text}))).collect();
        std::fs::write(root.join("stream.jsonl"), stream).unwrap();
        let config = format!(
            r#"batch_size = {b}
max_workers = 4

[provider]
kind = "scripted"
script = "script.json"

[sandbox]
harness = "harness/harness.py"
python = "{python}"
provisioner = "base"
base_packages = ["pydantic", "requests"]

[paths]
stream = "stream.jsonl"
out_dir = "out"
"#,
            python = default_python().display()
        );
        std::fs::write(root.join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, extra: &[&str]) -> Command {
        let mut cmd = insitu();
        cmd.arg("run").arg("--config").arg(self.path("run.toml")).args(extra);
        cmd
    }

    fn answers(&self) -> Vec<Value> {
        std::fs::read_to_string(self.path("out/answers.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), text(&out.stdout), text(&out.stderr));
    out
}

#[test]
fn scripted_run_writes_every_artifact() {
    let queries = testkit::stream(&["Count the words: one two three", "Add the numbers: 2 3", "Count the words: a b", "Describe yourself"]);
    let ws = Workspace::new(&queries, 2);
    let out = ok(ws.run(&[]).output().unwrap());
    let stdout = text(&out.stdout);
    assert!(stdout.contains("EGL:") && stdout.contains("library size: 2") && stdout.contains("success rate:"), "{stdout}");

    let answers = ws.answers();
    assert_eq!(answers.len(), 4);
    let ids: Vec<&str> = answers.iter().map(|a| a["query_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["q0001", "q0002", "q0003", "q0004"]);
    for (a, q) in answers.iter().zip(&queries) {
        match testkit::expected_answer(&q.text) {
            Some(expected) => assert_eq!(a["final_answer"], json!(expected)),
            None => assert!(a["final_answer"].as_str().unwrap().starts_with("The task is not completable")),
        }
        assert!(a["reasoning_summary"].is_string());
    }

    let events = read_trace(&ws.path("out/trace.ndjson")).unwrap();
    let starts = events.iter().filter(|e| e.kind == EventKind::BatchBoundary && e.str_field("edge") == Some("start")).count();
    assert_eq!(starts, 2);
    let header = &events[0];
    assert_eq!(header.kind, EventKind::Header);
    assert_eq!(header.payload["config"]["batch_size"], 2, "the effective config is echoed");
    assert_eq!(header.payload["config"]["budgets"]["executor_steps"], 30, "defaults are echoed too");

    let library = RegistrySnapshot::load(&ws.path("out/library")).unwrap();
    assert_eq!(library.names(), ["add_numbers", "count_words"]);
    for f in ["egl.csv", "library_size.csv", "batches.csv", "export_manifest.json"] {
        assert!(ws.path("out/exports").join(f).exists(), "missing export {f}");
    }
    let cp: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("out/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(cp["offset"], 4);

    let again = ws.run(&[]).output().unwrap();
    assert_eq!(again.status.code(), Some(2), "an occupied out_dir is refused");
    assert!(text(&again.stderr).contains("--resume"));

    let replay = ok(insitu().arg("replay").arg("--json").arg(ws.path("out/trace.ndjson")).output().unwrap());
    let summary: Value = serde_json::from_str(text(&replay.stdout).trim()).unwrap();
    assert_eq!(summary["queries"], 4);
    assert_eq!(summary["final_library_size"], 2);
}

#[test]
fn config_errors_name_the_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.txt"), "one query\n").unwrap();
    let out = insitu()
        .args(["run", "--mode", "warm-start", "--harness", "h.py", "--stream"])
        .arg(dir.path().join("s.txt"))
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("paths.library_in"), "{}", text(&out.stderr));

    let out = insitu().args(["run", "--batch-size", "0", "--harness", "h.py", "--stream", "s.txt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("batch_size"));

    std::fs::write(dir.path().join("bad.toml"), "batch_size = 4\nbogus_key = 1\n").unwrap();
    let out = insitu().arg("run").arg("--config").arg(dir.path().join("bad.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("bogus_key"), "{}", text(&out.stderr));

    std::fs::write(dir.path().join("secret.toml"), "[provider]\nkind = \"openai\"\nendpoint = \"http://127.0.0.1:9\"\nmodel = \"m\"\napi_key = \"sk-literal\"\n").unwrap();
    let out = insitu().arg("run").arg("--config").arg(dir.path().join("secret.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "literal credentials are not accepted");
}

#[test]
fn interrupted_run_resumes_at_the_checkpoint() {
    let queries = testkit::evolution_stream();
    let ws = Workspace::new(&queries, 1);
    let child = ws.run(&[]).stdout(Stdio::null()).stderr(Stdio::piped()).spawn().unwrap();
    let started = Instant::now();
    while !ws.path("out/checkpoint.json").exists() {
        assert!(started.elapsed() < Duration::from_secs(120), "no checkpoint appeared");
        std::thread::sleep(Duration::from_millis(20));
    }
    let kill = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(kill.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", text(&out.stderr));
    let cp: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("out/checkpoint.json")).unwrap()).unwrap();
    let offset = cp["offset"].as_u64().unwrap() as usize;
    assert!(offset >= 1 && offset < queries.len(), "interrupted at {offset}");
    assert_eq!(ws.answers().len(), offset);

    ok(ws.run(&["--resume"]).output().unwrap());
    let answers = ws.answers();
    let ids: Vec<&str> = answers.iter().map(|a| a["query_id"].as_str().unwrap()).collect();
    let expected: Vec<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    assert_eq!(ids, expected, "every query answered once, in order");
    let events = read_trace(&ws.path("out/trace.ndjson")).unwrap();
    let headers: Vec<&Value> = events.iter().filter(|e| e.kind == EventKind::Header).map(|e| &e.payload).collect();
    assert_eq!(headers.len(), 2);
    assert_eq!(headers[1]["config"]["resumed_at_offset"], json!(offset));
    let metrics = insitu::metrics::replay(&events).unwrap();
    assert_eq!(metrics.sums().queries, queries.len() as u64);
    assert_eq!(metrics.final_library_size(), Some(3));
}

#[test]
fn inspect_sorts_by_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let mut rare = testkit::capability_record("reverse_text", Capability::Reverse, 0, "q0001");
    rare.stats = ToolStats { invocations: 2, successes: 2, tool_output_tokens: 9 };
    let mut popular = testkit::capability_record("count_words", Capability::WordCount, 1, "q0004");
    popular.stats = ToolStats { invocations: 7, successes: 6, tool_output_tokens: 40 };
    RegistrySnapshot::from_records(vec![rare, popular]).unwrap().persist(dir.path()).unwrap();

    let out = ok(insitu().arg("inspect").arg("--json").arg(dir.path()).output().unwrap());
    let rows: Vec<Value> = text(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["name"].as_str(), rows[0]["invocations"].as_u64()), (Some("count_words"), Some(7)));
    assert_eq!((rows[1]["name"].as_str(), rows[1]["invocations"].as_u64()), (Some("reverse_text"), Some(2)));

    let table = text(&ok(insitu().arg("inspect").arg(dir.path()).output().unwrap()).stdout);
    let count = table.find("count_words").unwrap();
    let reverse = table.find("reverse_text").unwrap();
    assert!(count < reverse, "{table}");
    assert!(table.contains("synthesized at step 1 for q0004"));

    let missing = insitu().arg("inspect").arg(dir.path().join("nope")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn validate_tool_reports_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let source = testkit::capability_source("count_words", Capability::WordCount);
    let good = dir.path().join("count_words.py");
    std::fs::write(&good, &source).unwrap();
    let bad = dir.path().join("no_meta.py");
    std::fs::write(&bad, source.replace("__TOOL_META__", "TOOL_INFO")).unwrap();

    let out = insitu().arg("validate-tool").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(text(&out.stdout).contains("missing meta"), "{}", text(&out.stdout));

    let out = ok(insitu().arg("validate-tool").arg(&good).output().unwrap());
    assert!(text(&out.stdout).starts_with("valid: count_words"));

    let mismatch = insitu().arg("validate-tool").arg(&good).args(["--name", "tally_words"]).output().unwrap();
    assert!(!mismatch.status.success());
    assert!(text(&mismatch.stdout).contains("name mismatch"));

    let harness = testkit::write_harness(&dir.path().join("harness"));
    let out = ok(insitu()
        .arg("validate-tool")
        .arg(&good)
        .args(["--input", r#"{"text": "three little words"}"#, "--harness"])
        .arg(&harness)
        .arg("--python")
        .arg(default_python())
        .output()
        .unwrap());
    assert!(text(&out.stdout).contains(r#"run: ok {"count":3}"#), "{}", text(&out.stdout));

    let out = insitu()
        .arg("validate-tool")
        .arg(&good)
        .args(["--input", r#"{"words": 1}"#, "--harness"])
        .arg(&harness)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("run: tool_error"));
}

/// Two batches whose curves are worked out by hand below.
fn golden_trace(path: &Path) {
    let w = TraceWriter::create(path, Box::new(LogicalClock::default())).unwrap();
    let events = [
        (EventKind::Header, json!({"format_version": "1.0", "config": {}})),
        (EventKind::BatchBoundary, json!({"edge": "start", "batch": 0, "query_ids": ["q1", "q2"]})),
        (EventKind::Validation, json!({"query_id": "q1", "stage": "synthesis", "passed": true})),
        (EventKind::Validation, json!({"query_id": "q2", "stage": "synthesis", "passed": false})),
        (EventKind::Invocation, json!({"query_id": "q1", "status": "ok", "tool_tokens": 10})),
        (EventKind::Invocation, json!({"query_id": "q2", "status": "tool_error", "tool_tokens": 6})),
        (EventKind::Absorb, json!({"clusters": []})),
        (EventKind::Commit, json!({"library_size": 1})),
        (EventKind::BatchBoundary, json!({"edge": "end", "batch": 0})),
        (EventKind::BatchBoundary, json!({"edge": "start", "batch": 1, "query_ids": ["q3"]})),
        (EventKind::Invocation, json!({"query_id": "q3", "status": "ok", "tool_tokens": 4})),
        (EventKind::Commit, json!({"library_size": 1})),
        (EventKind::BatchBoundary, json!({"edge": "end", "batch": 1})),
    ];
    for (kind, payload) in events {
        w.append(kind, payload).unwrap();
    }
}

#[test]
fn export_matches_hand_computed_curves() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.ndjson");
    golden_trace(&trace);
    ok(insitu().arg("export").arg(&trace).arg(dir.path().join("a")).output().unwrap());
    let read = |sub: &str, f: &str| std::fs::read_to_string(dir.path().join(sub).join(f)).unwrap();
    // One tool created over 1, 2 and 3 invocations.
    assert_eq!(read("a", "egl.csv"), "cumulative_queries,egl\n1,1000.000000\n2,500.000000\n3,333.333333\n");
    assert_eq!(read("a", "library_size.csv"), "cumulative_queries,library_size\n2,1\n3,1\n");
    // Batch 0: 1 of 2 ok, (10 + 6) / 2 tokens; batch 1: 1 of 1, 4 tokens.
    assert_eq!(
        read("a", "batches.csv"),
        "batch,success_rate,avg_tokens_per_invocation\n0,0.500000,8.000000\n1,1.000000,4.000000\n"
    );
    ok(insitu().arg("export").arg(&trace).arg(dir.path().join("b")).output().unwrap());
    for f in ["egl.csv", "library_size.csv", "batches.csv", "export_manifest.json"] {
        assert_eq!(read("a", f), read("b", f), "{f} differs between exports");
    }

    let windowed = dir.path().join("w");
    ok(insitu().arg("export").arg(&trace).arg(&windowed).args(["--egl-window", "1"]).output().unwrap());
    assert_eq!(read("w", "egl.csv"), "cumulative_queries,egl\n1,1000.000000\n2,0.000000\n3,0.000000\n");

    let body = std::fs::read_to_string(&trace).unwrap();
    std::fs::write(&trace, body.replacen("\"tool_tokens\":10", "\"tool_tokens\":99", 1)).unwrap();
    let out = insitu().arg("replay").arg(&trace).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("digest mismatch"), "{}", text(&out.stderr));
}
