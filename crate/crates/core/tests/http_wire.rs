use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;
use sifter_core::backends::{BackendPolicy, ChatBackend, ChatClient, EmbedClient, HttpChat, HttpEmbedder, ModelParams};
use sifter_core::error::{Error, FailureKind};

#[derive(Debug, Clone)]
struct Captured {
    request_line: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0usize;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Captured {
                request_line: request_line.trim_end().to_string(),
                authorization,
                body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (base, seen, handle)
}

fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn fast_policy() -> BackendPolicy {
    BackendPolicy { max_retries: 3, backoff_base_ms: 1, max_concurrency: 2, timeout_ms: 5_000 }
}

#[test]
fn chat_request_shape_and_reply() {
    let (base, seen, handle) = serve(vec![(200, chat_reply("<ranking>1,2</ranking>"))]);
    let chat = HttpChat::new(format!("{base}/v1/"), Some("sk-test".into()), Duration::from_secs(5));
    let params = ModelParams { model: "proxy-small".into(), temperature: 1.0, max_output_tokens: 64 };
    let text = chat.complete(&params.request("hello")).unwrap();
    handle.join().unwrap();
    assert_eq!(text, "<ranking>1,2</ranking>");
    let got = seen.lock().unwrap()[0].clone();
    assert_eq!(got.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(got.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(got.body["model"], "proxy-small");
    assert_eq!(got.body["temperature"], 1.0);
    assert_eq!(got.body["max_tokens"], 64);
    assert_eq!(got.body["messages"][0]["role"], "user");
    assert_eq!(got.body["messages"][0]["content"], "hello");
}

#[test]
fn reasoning_field_is_kept_as_think_block() {
    let body = serde_json::json!({"choices": [{"message": {"content": "<ranking>3</ranking>", "reasoning_content": "because"}}]});
    let (base, _, handle) = serve(vec![(200, body.to_string())]);
    let chat = HttpChat::new(base, None, Duration::from_secs(5));
    let text = chat.complete(&ModelParams::default().request("q")).unwrap();
    handle.join().unwrap();
    assert!(text.starts_with("<think>because</think>"));
    assert!(text.ends_with("<ranking>3</ranking>"));
}

#[test]
fn rate_limit_is_retried_through_the_client() {
    let (base, seen, handle) = serve(vec![
        (429, r#"{"error":"slow down"}"#.into()),
        (503, r#"{"error":"busy"}"#.into()),
        (200, chat_reply("Oahu")),
    ]);
    let client = ChatClient::new(Arc::new(HttpChat::new(base, None, Duration::from_secs(5))), fast_policy()).unwrap();
    let out = client.chat_complete(&ModelParams::default().request("q")).unwrap();
    handle.join().unwrap();
    assert_eq!(out.text, "Oahu");
    assert_eq!(out.retries.len(), 2);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn status_classification() {
    let (base, _, handle) = serve(vec![
        (400, r#"{"error":{"code":"context_length_exceeded"}}"#.into()),
        (401, r#"{"error":"bad key"}"#.into()),
    ]);
    let chat = HttpChat::new(base, None, Duration::from_secs(5));
    let req = ModelParams::default().request("q");
    assert!(matches!(chat.complete(&req), Err(Error::ContextOverflow(_))));
    match chat.complete(&req) {
        Err(Error::Backend(b)) => {
            assert_eq!(b.kind, FailureKind::Fatal);
            assert_eq!(b.status, Some(401));
        }
        other => panic!("{other:?}"),
    }
    handle.join().unwrap();
}

#[test]
fn unreachable_host_is_transient() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let chat = HttpChat::new(format!("http://{addr}"), None, Duration::from_secs(2));
    match chat.complete(&ModelParams::default().request("q")) {
        Err(Error::Backend(b)) => assert_eq!(b.kind, FailureKind::Transient),
        other => panic!("{other:?}"),
    }
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]});
    let (base, seen, handle) = serve(vec![(200, body.to_string())]);
    let client = EmbedClient::new(
        Arc::new(HttpEmbedder::new(base, Some("k".into()), "embed-small", Duration::from_secs(5))),
        fast_policy(),
    )
    .unwrap();
    let out = client.embed(&["first".to_string(), "second".to_string()]).unwrap();
    handle.join().unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let got = seen.lock().unwrap()[0].clone();
    assert_eq!(got.request_line, "POST /embeddings HTTP/1.1");
    assert_eq!(got.body["model"], "embed-small");
    assert_eq!(got.body["input"], serde_json::json!(["first", "second"]));
}
