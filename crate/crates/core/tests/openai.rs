//! The chat-completions client against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;

use serde_json::{json, Value};

use insitu::gateway::{ChatProvider, GatewayError, OpenAiConfig, OpenAiProvider};
use insitu::{AgentRole, ChatExchange, ChatMessage};

struct Seen {
    authorization: String,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and
/// reports each request it received.
fn stub(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = value.trim().to_string(),
                    _ => {}
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            let _ = tx.send(Seen { authorization, body: serde_json::from_slice(&raw).unwrap() });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn provider(url: &str, attempts: u32) -> OpenAiProvider {
    std::env::set_var("INSITU_STUB_KEY", "sk-stub");
    let config = OpenAiConfig { max_attempts: attempts, initial_backoff_ms: 5, ..OpenAiConfig::new(url, "INSITU_STUB_KEY") };
    OpenAiProvider::new(config).unwrap()
}

fn exchange() -> ChatExchange {
    let mut e = ChatExchange::new(AgentRole::Integrator, vec![ChatMessage::system("be brief"), ChatMessage::user("2+2?")]).unwrap();
    e.model_id = "stub-model".into();
    e
}

fn completion(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}], "usage": {"prompt_tokens": 11, "completion_tokens": 2}})
        .to_string()
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let (url, seen) = stub(vec![(503, "busy".into()), (429, "slow down".into()), (200, completion("4"))]);
    let result = provider(&url, 3).complete(&exchange()).unwrap();
    assert_eq!(result.text, "4");
    assert_eq!((result.prompt_tokens, result.completion_tokens), (11, 2));
    let requests: Vec<Seen> = seen.try_iter().collect();
    assert_eq!(requests.len(), 3);
    for r in &requests {
        assert_eq!(r.authorization, "Bearer sk-stub");
        assert_eq!(r.body["model"], "stub-model");
        assert_eq!(r.body["messages"][0], json!({"role": "system", "content": "be brief"}));
        assert_eq!(r.body["messages"][1], json!({"role": "user", "content": "2+2?"}));
    }
    assert_eq!(requests[0].body, requests[2].body, "retries resend the same request");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, "{\"error\":\"bad\"}".into())]);
    let err = provider(&url, 3).complete(&exchange()).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 400, .. }), "{err}");
    assert_eq!(seen.try_iter().count(), 1);
}

#[test]
fn attempts_are_bounded() {
    let (url, seen) = stub(vec![(500, "down".into()), (502, "down".into())]);
    let err = provider(&url, 2).complete(&exchange()).unwrap_err();
    match err {
        GatewayError::Transport { attempts, message } => {
            assert_eq!(attempts, 2);
            assert!(message.contains("502"), "{message}");
        }
        other => panic!("expected a transport error, got {other}"),
    }
    assert_eq!(seen.try_iter().count(), 2);
}

#[test]
fn missing_usage_falls_back_to_estimates() {
    let body = json!({"choices": [{"message": {"content": "four!"}}]}).to_string();
    let (url, _seen) = stub(vec![(200, body)]);
    let result = provider(&url, 1).complete(&exchange()).unwrap();
    assert_eq!(result.completion_tokens, 2, "ceil(5 / 4)");
    assert_eq!(result.prompt_tokens, 2 + 1);
}
