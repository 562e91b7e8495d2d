//! The harness wire protocol, driven directly, and sandbox isolation.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

use serde_json::{json, Value};

use insitu::sandbox::{
    default_python, parse_protocol_document, request_document, validate_source, IndexedProvisioner, InvocationStatus, Limits,
    ProtocolDocument, Sandbox, SandboxConfig, SingleFlight, TRUNCATION_MARKER,
};
use insitu::testkit::{self, fixtures, BASE_PACKAGES};

struct Harnessed {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_harness(dir: &Path, source: &str, stdin: &str) -> Harnessed {
    let harness = testkit::write_harness(&dir.join("harness"));
    let tool = dir.join("tool.py");
    std::fs::write(&tool, source).unwrap();
    let mut child = Command::new(default_python())
        .arg(&harness)
        .arg(&tool)
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    Harnessed {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

#[test]
fn harness_emits_exactly_one_document_per_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let ok = run_harness(d, &fixtures::echo().source, &request_document(&json!({"text": "héllo"})));
    assert_eq!(ok.code, 0);
    assert_eq!(ok.stdout, "{\"status\":\"ok\",\"output\":{\"result\":\"héllo\"}}\n");
    assert!(ok.stderr.contains("library chatter"), "chatter goes to stderr: {}", ok.stderr);
    assert_eq!(parse_protocol_document(&ok.stdout).unwrap(), ProtocolDocument::Ok(json!({"result": "héllo"})));

    let invalid = run_harness(d, &fixtures::echo().source, &request_document(&json!({"text": 5})));
    assert_eq!(invalid.code, 0);
    match parse_protocol_document(&invalid.stdout).unwrap() {
        ProtocolDocument::Error { kind, message } => {
            assert_eq!(kind, "ValidationError");
            assert!(message.contains("text"), "{message}");
        }
        other => panic!("expected an error document, got {other:?}"),
    }

    let raised = run_harness(d, &fixtures::raise().source, &request_document(&json!({"text": "x"})));
    assert_eq!(raised.code, 0, "tool exceptions are reported, not crashed on");
    let doc: Value = serde_json::from_str(&raised.stdout).unwrap();
    assert_eq!(doc["status"], "error");
    assert_eq!(doc["kind"], "RuntimeError");
    assert_eq!(doc.as_object().unwrap().len(), 3);

    let broken = run_harness(d, "def run(:\n", &request_document(&json!({})));
    assert_eq!(broken.code, 3, "load failures exit nonzero");
    assert!(broken.stdout.is_empty());
    assert!(broken.stderr.contains("SyntaxError"), "{}", broken.stderr);

    let bad_request = run_harness(d, &fixtures::echo().source, "{\"text\": \"no envelope\"}");
    assert_eq!(bad_request.code, 2);
    assert!(bad_request.stdout.is_empty());
}

#[test]
fn concurrent_invocations_get_disjoint_workspaces() {
    let dir = tempfile::tempdir().unwrap();
    let sandbox = Arc::new(testkit::fixture_sandbox(dir.path(), Limits::default()));
    let artifact = fixtures::cwd().artifact();
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let (sandbox, artifact) = (sandbox.clone(), artifact.clone());
            std::thread::spawn(move || sandbox.invoke(&artifact, &json!({"text": format!("note {i}")})))
        })
        .collect();
    let mut cwds = std::collections::BTreeSet::new();
    for h in handles {
        let r = h.join().unwrap();
        assert_eq!(r.status, InvocationStatus::Ok, "{:?}", r.payload);
        cwds.insert(r.payload["result"].as_str().unwrap().to_string());
    }
    assert_eq!(cwds.len(), 4, "each invocation ran in its own directory: {cwds:?}");
    let leftover: Vec<_> = std::fs::read_dir(sandbox.scratch_root()).unwrap().collect();
    assert!(leftover.is_empty(), "scratch directories are removed after use");
}

#[test]
fn injected_output_is_truncated_but_payload_is_whole() {
    let dir = tempfile::tempdir().unwrap();
    let limits = Limits { max_output_bytes: 48, ..Limits::default() };
    let sandbox = testkit::fixture_sandbox(dir.path(), limits);
    let long = "word ".repeat(40);
    let r = sandbox.invoke(&fixtures::echo().artifact(), &json!({"text": long}));
    assert_eq!(r.status, InvocationStatus::Ok);
    assert_eq!(r.payload["result"], json!(long));
    assert!(r.output_text.len() <= 48, "{} bytes", r.output_text.len());
    assert!(r.output_text.ends_with(TRUNCATION_MARKER));
    assert!(r.payload.to_string().starts_with(r.output_text.trim_end_matches(TRUNCATION_MARKER)));
}

const ENV_PROBE: &str = r#"import os
from pydantic import BaseModel, Field

__TOOL_META__ = {
    "name": "list_environment",
    "description": "Lists the environment variable names visible to the tool",
    "dependencies": [],
}


class InputModel(BaseModel):
    prefix: str = Field(..., description="Only names starting with this")


class OutputModel(BaseModel):
    names: list[str] = Field(..., description="Sorted variable names")


def run(input: InputModel) -> OutputModel:
    return OutputModel(names=sorted(k for k in os.environ if k.startswith(input.prefix)))
"#;

#[test]
fn host_environment_is_not_inherited() {
    std::env::set_var("INSITU_PROBE_SECRET", "do-not-leak");
    std::env::set_var("INSITU_PROBE_ALLOWED", "visible");
    let dir = tempfile::tempdir().unwrap();
    let harness = testkit::write_harness(&dir.path().join("harness"));
    let provisioner = Arc::new(SingleFlight::new(IndexedProvisioner::new(default_python(), BASE_PACKAGES)));
    let config = SandboxConfig {
        env_allowlist: vec!["INSITU_PROBE_ALLOWED".into()],
        ..SandboxConfig::new(dir.path().join("sandbox"), harness)
    };
    let sandbox = Sandbox::new(config, provisioner).unwrap();
    let artifact = validate_source(ENV_PROBE, Some("list_environment")).unwrap();

    let probed = sandbox.invoke(&artifact, &json!({"prefix": "INSITU_"}));
    assert_eq!(probed.status, InvocationStatus::Ok, "{:?}", probed.payload);
    assert_eq!(probed.payload["names"], json!(["INSITU_PROBE_ALLOWED"]));

    let tool_vars = sandbox.invoke(&artifact, &json!({"prefix": "TOOL_"}));
    assert_eq!(tool_vars.payload["names"], json!(["TOOL_CACHE_DIR", "TOOL_SCRATCH_DIR"]));
}

#[test]
fn artifacts_are_stored_once_by_digest() {
    let dir = tempfile::tempdir().unwrap();
    let sandbox = testkit::fixture_sandbox(dir.path(), Limits::default());
    let artifact = fixtures::echo().artifact();
    for text in ["a", "b"] {
        assert!(sandbox.invoke(&artifact, &json!({ "text": text })).is_ok());
    }
    let stored: Vec<_> = std::fs::read_dir(dir.path().join("sandbox/artifacts")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].to_string_lossy(), format!("{}.py", artifact.digest));
}
