use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use pipediag::backend::{BackendClient, BackendSpec};
use pipediag::error::Error;

/// Serves one canned (status, body) per connection in order. Request bodies
/// are forwarded on the channel.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(String::from_utf8(buf).unwrap());
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn spec(url: &str) -> BackendSpec {
    BackendSpec {
        backoff_base_ms: 1,
        ..BackendSpec::external(url, "mock-model")
    }
}

#[test]
fn external_completion_returns_message_text() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":"hello there"}}]}"#.to_string();
    let (url, rx) = serve(vec![(200, body)]);
    let client = BackendClient::new(spec(&url)).unwrap();
    assert_eq!(client.complete("sys", "user text", 0).unwrap(), "hello there");
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["model"], "mock-model");
    assert_eq!(sent["messages"][1]["content"], "user text");
}

#[test]
fn transient_errors_are_retried() {
    let ok = r#"{"choices":[{"message":{"content":"after retry"}}]}"#.to_string();
    let (url, _rx) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, ok)]);
    let client = BackendClient::new(spec(&url)).unwrap();
    assert_eq!(client.complete("s", "u", 0).unwrap(), "after retry");
}

#[test]
fn unauthorized_is_an_auth_error() {
    let (url, _rx) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let client = BackendClient::new(spec(&url)).unwrap();
    assert!(matches!(client.complete("s", "u", 0), Err(Error::Auth(_))));
}

#[test]
fn missing_text_path_is_malformed() {
    let (url, _rx) = serve(vec![(200, r#"{"unexpected":true}"#.into())]);
    let client = BackendClient::new(spec(&url)).unwrap();
    assert!(matches!(client.complete("s", "u", 0), Err(Error::MalformedResponse(_))));
}

#[test]
fn unset_token_variable_fails_before_sending() {
    let mut s = spec("http://127.0.0.1:9/none");
    s.auth_token_env = Some("PIPEDIAG_TEST_TOKEN_THAT_IS_NOT_SET".into());
    let client = BackendClient::new(s).unwrap();
    assert!(matches!(client.complete("s", "u", 0), Err(Error::Auth(_))));
}
