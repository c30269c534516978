use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use regionscope::llm::{complete_many, Backend, CompletionRequest, HttpChatBackend, HttpChatConfig};
use regionscope::Error;

struct Seen {
    bodies: Vec<serde_json::Value>,
    auth: Vec<Option<String>>,
}

/// Serves one canned reply per request: `reply(index, n)` gives status and
/// choice count.
fn stub(reply: fn(usize, u64) -> (u16, u64)) -> Option<(String, Arc<Mutex<Seen>>)> {
    let listener = TcpListener::bind("127.0.0.1:0").ok()?;
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen {
        bodies: vec![],
        auth: vec![],
    }));
    let s = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut length, mut auth) = (0, None);
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    } else if k.eq_ignore_ascii_case("authorization") {
                        auth = Some(v.trim().to_string());
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let index = {
                let mut g = s.lock().unwrap();
                g.bodies.push(req.clone());
                g.auth.push(auth);
                g.bodies.len() - 1
            };
            let (status, n) = reply(index, req["n"].as_u64().unwrap());
            let payload = if status == 200 {
                let choices: Vec<_> = (0..n)
                    .map(|i| serde_json::json!({"message": {"content": format!("Answer: {}", 10 * index as u64 + i)}}))
                    .collect();
                serde_json::json!({ "choices": choices }).to_string()
            } else {
                "{}".to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    Some((url, seen))
}

fn backend(url: &str, key_env: &str) -> HttpChatBackend {
    HttpChatBackend::new(HttpChatConfig {
        base_url: url.to_string(),
        model: "stub-model".into(),
        api_key_env: key_env.into(),
        max_in_flight: 1,
        requests_per_minute: 0,
        max_retries: 2,
        backoff_ms: 5,
        timeout_secs: 5,
    })
}

#[test]
fn client_errors_are_not_retried() {
    let Some((url, seen)) = stub(|_, n| (400, n)) else { return };
    let b = backend(&url, "REGIONSCOPE_TEST_UNSET");
    let err = b.complete(&CompletionRequest::new("hi")).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(b.attempts(), 1);
    assert_eq!(seen.lock().unwrap().bodies.len(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let Some((url, _)) = stub(|_, n| (503, n)) else { return };
    let b = backend(&url, "REGIONSCOPE_TEST_UNSET");
    let err = b.complete(&CompletionRequest::new("hi")).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(b.attempts(), 3);
}

#[test]
fn rate_limit_status_is_transient() {
    let Some((url, _)) = stub(|i, n| (if i == 0 { 429 } else { 200 }, n)) else { return };
    let b = backend(&url, "REGIONSCOPE_TEST_UNSET");
    let out = b.complete(&CompletionRequest::new("hi")).unwrap();
    assert_eq!(out, vec!["Answer: 10"]);
    assert_eq!(b.attempts(), 2);
}

#[test]
fn short_choice_lists_are_topped_up() {
    let Some((url, seen)) = stub(|_, n| (200, n.min(2))) else { return };
    let b = backend(&url, "REGIONSCOPE_TEST_UNSET");
    let out = b.complete(&CompletionRequest::new("hi").samples(5)).unwrap();
    assert_eq!(out.len(), 5);
    let asked: Vec<u64> = seen.lock().unwrap().bodies.iter().map(|v| v["n"].as_u64().unwrap()).collect();
    assert_eq!(asked, vec![5, 3, 1]);
}

#[test]
fn request_body_and_auth_header() {
    let Some((url, seen)) = stub(|_, n| (200, n)) else { return };
    std::env::set_var("REGIONSCOPE_TEST_KEY", "sk-test");
    let b = backend(&format!("{url}/v1/"), "REGIONSCOPE_TEST_KEY");
    let req = CompletionRequest::new("prompt text").temperature(0.2).top_p(0.9).max_tokens(17);
    let answers = complete_many(&b, &req, 3);
    assert!(answers.iter().all(|a| a.is_ok()));
    let g = seen.lock().unwrap();
    assert_eq!(g.bodies.len(), 3);
    let body = &g.bodies[0];
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "prompt text");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["n"], 1);
    assert_eq!(g.auth[0].as_deref(), Some("Bearer sk-test"));
}
