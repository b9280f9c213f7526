use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use lexcon_core::backend::{
    Backend, BackendError, DecodingParams, GenerationRequest, HttpBackend, HttpConfig, RetryPolicy,
};
use serde_json::{json, Value};

struct Captured {
    headers: Vec<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = Vec::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = reader.into_inner();
            let extra = if status == 429 { "Retry-After: 0\r\n" } else { "" };
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\n{extra}Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn ok(text: &str) -> (u16, String) {
    (
        200,
        json!({"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 7, "completion_tokens": 3}})
            .to_string(),
    )
}

fn backend(url: &str, key: Option<&str>, retries: u32) -> HttpBackend {
    let mut cfg = HttpConfig::new(url);
    cfg.api_key = key.map(str::to_string);
    cfg.retry = RetryPolicy {
        max_retries: retries,
        initial_backoff_ms: 1,
        max_backoff_ms: 5,
        multiplier: 2.0,
    };
    cfg.timeout = Duration::from_secs(10);
    HttpBackend::new(cfg).unwrap()
}

fn request() -> GenerationRequest {
    let mut params = DecodingParams::greedy();
    params.seed = Some(11);
    GenerationRequest::user_prompt("test-model", "Write about a cat.", params)
}

#[test]
fn successful_call_sends_openai_body_and_bearer_key() {
    let (url, seen) = serve(vec![ok("a cat sat")]);
    let b = backend(&url, Some("sk-test"), 0);
    let out = b.generate(&request()).unwrap();
    assert_eq!(out.text, "a cat sat");
    assert_eq!(out.prompt_tokens, Some(7));
    assert_eq!(out.completion_tokens, Some(3));
    assert!(!out.cached);

    let seen = seen.lock().unwrap();
    let c = &seen[0];
    assert!(c.headers[0].starts_with("POST /v1/chat/completions"));
    assert!(c
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    assert_eq!(c.body["model"], "test-model");
    assert_eq!(c.body["messages"][0]["content"], "Write about a cat.");
    assert_eq!(c.body["seed"], 11);
    assert_eq!(c.body["temperature"], 0.05);
    assert!(c.body.get("top_k").is_none());
}

#[test]
fn server_errors_and_rate_limits_are_retried() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (429, r#"{"error":"slow down"}"#.into()),
        ok("third time"),
    ]);
    let out = backend(&url, None, 3).generate(&request()).unwrap();
    assert_eq!(out.text, "third time");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(!seen[0]
        .headers
        .iter()
        .any(|h| h.to_ascii_lowercase().starts_with("authorization")));
}

#[test]
fn retries_are_bounded() {
    let (url, _) = serve(vec![(503, "busy".into()), (503, "busy".into())]);
    let err = backend(&url, None, 1).generate(&request()).unwrap_err();
    assert_eq!(
        err,
        BackendError::Upstream {
            status: 503,
            attempts: 2,
            body: "busy".into()
        }
    );

    let (url, _) = serve(vec![(429, "a".into()), (429, "b".into())]);
    let err = backend(&url, None, 1).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::RateLimited { attempts: 2, .. }), "{err:?}");
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = serve(vec![(401, "bad key".into()), ok("unreachable")]);
    let err = backend(&url, Some("wrong"), 3).generate(&request()).unwrap_err();
    assert_eq!(
        err,
        BackendError::Auth {
            status: 401,
            body: "bad key".into()
        }
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_payloads_are_reported() {
    let (url, _) = serve(vec![(200, "not json".into())]);
    let err = backend(&url, None, 0).generate(&request()).unwrap_err();
    assert!(
        matches!(err, BackendError::Malformed { ref body, .. } if body == "not json"),
        "{err:?}"
    );

    let (url, _) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
    let err = backend(&url, None, 0).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Malformed { .. }), "{err:?}");
}

#[test]
fn client_errors_other_than_auth_fail_fast() {
    let (url, seen) = serve(vec![(400, "bad request".into()), ok("unreachable")]);
    let err = backend(&url, None, 3).generate(&request()).unwrap_err();
    assert!(
        matches!(
            err,
            BackendError::Upstream {
                status: 400,
                attempts: 1,
                ..
            }
        ),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn connection_refused_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = backend(&url, None, 1).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err:?}");
}
