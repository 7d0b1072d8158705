//! The provider key must not surface in replies, logs or workspace files,
//! even when the provider echoes it back in an error.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::http::{Method, StatusCode};
use serde_json::Value;
use tracing_subscriber::fmt::MakeWriter;

use common::{clustered, loop_config, sessions, Client, OPERATOR, VIEWER};
use mmdialog_core::config::BackendKind;
use mmdialog_service::AppState;

const KEY_VAR: &str = "MMDIALOG_TEST_PROVIDER_KEY";
const SECRET: &str = "sk-test-9f8e7d6c5b4a39281706";

#[derive(Clone, Default)]
struct Captured(Arc<Mutex<Vec<u8>>>);

impl Write for Captured {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl<'a> MakeWriter<'a> for Captured {
    type Writer = Captured;
    fn make_writer(&'a self) -> Captured {
        self.clone()
    }
}

/// Answers every request with 401 and an error message quoting the key it
/// was sent. Returns the endpoint and a count of requests that carried it.
fn echoing_provider() -> (String, Arc<Mutex<usize>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let saw_key = Arc::new(Mutex::new(0));
    let counter = Arc::clone(&saw_key);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut key = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if lower.starts_with("authorization:") {
                    key = line.trim().rsplit(' ').next().unwrap_or("").to_string();
                }
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            if key == SECRET {
                *counter.lock().unwrap() += 1;
            }
            let payload = format!(
                r#"{{"error":{{"message":"Incorrect API key provided: {key}","type":"invalid_request_error","code":"invalid_api_key"}}}}"#
            );
            let _ = write!(
                stream,
                "HTTP/1.1 401 Unauthorized\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (format!("http://{addr}/v1/chat/completions"), saw_key)
}

fn files_containing(root: &Path, needle: &str) -> Vec<String> {
    let mut hits = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if String::from_utf8_lossy(&std::fs::read(&path).unwrap()).contains(needle) {
                hits.push(path.display().to_string());
            }
        }
    }
    hits
}

#[tokio::test(flavor = "multi_thread")]
async fn provider_key_never_leaves_the_process() {
    let logs = Captured::default();
    tracing::subscriber::set_global_default(
        tracing_subscriber::fmt().with_max_level(tracing::Level::TRACE).with_writer(logs.clone()).finish(),
    )
    .unwrap();
    // the only test in this binary, so no other thread reads the environment
    std::env::set_var(KEY_VAR, SECRET);

    let (endpoint, saw_key) = echoing_provider();
    let mut cfg = loop_config();
    cfg.batch_size = 2;
    cfg.generation_budget_factor = 2;
    cfg.backend.kind = BackendKind::Http;
    cfg.backend.endpoint = endpoint;
    cfg.backend.credential_env = KEY_VAR.into();
    cfg.backend.timeout_secs = 10;
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new(AppState::new(clustered(dir.path(), cfg), sessions()).unwrap());

    let mut bodies: Vec<Value> = Vec::new();
    let started = client.call(Method::POST, "/api/iterations", Some(OPERATOR), None, None).await;
    assert_eq!(started.status, StatusCode::ACCEPTED);
    let t = Instant::now();
    let failed = loop {
        let r = client.get("/api/iterations/0/queue", VIEWER).await;
        if r.body["state"] != "generating" {
            break r;
        }
        assert!(t.elapsed() < Duration::from_secs(60));
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(failed.body["state"], "failed", "{}", failed.body);
    assert!(*saw_key.lock().unwrap() > 0, "the provider never received the key");
    bodies.push(failed.body);
    for path in ["/api/healthz", "/api/iterations", "/api/seedset", "/api/stats", "/api/openapi.json"] {
        bodies.push(client.get(path, VIEWER).await.body);
    }
    let overview = &bodies[2];
    assert_eq!(overview["generation"]["state"], "failed");
    assert_eq!(overview["can_start"], true, "a failed generation can be retried");

    for body in &bodies {
        assert!(!body.to_string().contains(SECRET), "reply leaks the key: {body}");
    }
    let log_text = String::from_utf8(logs.0.lock().unwrap().clone()).unwrap();
    assert!(log_text.contains("generation failed"), "{log_text}");
    assert!(!log_text.contains(SECRET), "log leaks the key");
    assert_eq!(files_containing(dir.path(), SECRET), Vec::<String>::new());
}
