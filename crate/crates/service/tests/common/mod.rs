#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mmdialog_core::pipeline::{self, StageOptions};
use mmdialog_core::workspace::Workspace;
use mmdialog_core::PipelineConfig;
use mmdialog_service::{router, AppState, Capability, Sessions, OPENAPI};

pub const FIXED_TIMESTAMP: &str = "2023-10-15T00:00:00Z";
pub const OPERATOR: &str = "op-token-0001";
pub const ANNOTATOR: &str = "ann-token-0002";
pub const VIEWER: &str = "view-token-0003";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

/// Five-item batches over the 200-image fixture.
pub fn loop_config() -> PipelineConfig {
    PipelineConfig {
        seed: 7,
        k: 5,
        embedding_dimension: 8,
        conversations: 10,
        batch_size: 5,
        ..PipelineConfig::default()
    }
}

pub fn clustered(root: &Path, config: PipelineConfig) -> Workspace {
    let mut ws = Workspace::init(root, config).unwrap();
    ws.set_timestamp(FIXED_TIMESTAMP);
    let opts = StageOptions::default();
    pipeline::run_ingest(&mut ws, &fixture("corpus200.tsv"), &opts).unwrap();
    pipeline::run_score(&mut ws, Some(&fixture("corpus200.embeddings.jsonl")), &opts).unwrap();
    pipeline::run_cluster(&mut ws, &opts).unwrap();
    ws
}

pub fn sessions() -> Sessions {
    let mut s = Sessions::default();
    s.add("operator", BTreeSet::from([Capability::Annotate, Capability::Iterate]), OPERATOR);
    s.add("annotator", BTreeSet::from([Capability::Annotate]), ANNOTATOR);
    s.add("viewer", BTreeSet::from([Capability::ReadOnly]), VIEWER);
    s
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Value,
}

/// Request helper that checks every JSON reply against the published schema.
#[derive(Clone)]
pub struct Client {
    pub app: Router,
    pub state: Arc<AppState>,
    contract: Arc<Value>,
}

impl Client {
    pub fn new(state: Arc<AppState>) -> Self {
        Self::with_ui(state, None)
    }

    pub fn with_ui(state: Arc<AppState>, ui: Option<&Path>) -> Self {
        let app = router(Arc::clone(&state), ui);
        Client { app, state, contract: Arc::new(serde_json::from_str(OPENAPI).unwrap()) }
    }

    pub async fn raw(&self, method: Method, path: &str, token: Option<&str>, key: Option<&str>, body: Option<Value>) -> (StatusCode, HeaderMap, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        if let Some(k) = key {
            req = req.header("idempotency-key", k);
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let res = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, headers, bytes)
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, key: Option<&str>, body: Option<Value>) -> Reply {
        let (status, headers, bytes) = self.raw(method.clone(), path, token, key, body).await;
        let body: Value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|e| panic!("{method} {path}: non-JSON reply ({e}): {}", String::from_utf8_lossy(&bytes)));
        self.check_contract(&method, path, status, &body);
        Reply { status, headers, body }
    }

    pub async fn get(&self, path: &str, token: &str) -> Reply {
        self.call(Method::GET, path, Some(token), None, None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> Reply {
        self.call(Method::POST, path, Some(token), None, Some(body)).await
    }

    pub fn check_contract(&self, method: &Method, path: &str, status: StatusCode, body: &Value) {
        let template = template_for(&self.contract, path).unwrap_or_else(|| panic!("{path} is not documented"));
        let pointer = format!(
            "/paths/{}/{}/responses/{}/content/application~1json/schema",
            template.replace('~', "~0").replace('/', "~1"),
            method.as_str().to_ascii_lowercase(),
            status.as_u16()
        );
        assert!(
            self.contract.pointer(&pointer).is_some(),
            "{method} {path} answered {status}, which the description does not list"
        );
        let mut schema = (*self.contract).clone();
        // braces are not legal in a URI fragment
        let fragment = pointer.replace('{', "%7B").replace('}', "%7D");
        schema.as_object_mut().unwrap().insert("$ref".into(), json!(format!("#{fragment}")));
        let validator = jsonschema::draft202012::new(&schema).expect("schema compiles");
        let errors: Vec<String> = validator.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errors.is_empty(), "{method} {path} ({status}) violates its schema: {errors:?}\n{body:#}");
    }
}

fn template_for(contract: &Value, path: &str) -> Option<String> {
    let parts: Vec<&str> = path.split('?').next().unwrap().split('/').collect();
    contract["paths"].as_object()?.keys().find(|t| {
        let tp: Vec<&str> = t.split('/').collect();
        tp.len() == parts.len() && tp.iter().zip(&parts).all(|(a, b)| a.starts_with('{') || a == b)
    }).cloned()
}

/// Poll until iteration `k` leaves the generating state.
pub async fn wait_for_batch(client: &Client, k: u32) -> Reply {
    let start = Instant::now();
    loop {
        let r = client.get(&format!("/api/iterations/{k}/queue"), VIEWER).await;
        if r.status != StatusCode::OK || r.body["state"] != "generating" {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "generation of iteration {k} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Labels that promote items 0, 1 and 3 of every five.
pub fn scripted_label(i: usize) -> Value {
    match i % 5 {
        0 => json!({"quality": "Excellent", "characteristics": ["ImageCreation", "ImageComparison"]}),
        1 => json!({"quality": "Satisfactory", "characteristics": ["IntrinsicImageUnderstanding", "ExtrinsicImageUnderstanding"]}),
        2 => json!({"quality": "Poor", "error_tags": ["Incoherence"]}),
        3 => json!({"quality": "Satisfactory", "characteristics": ["ImageComparison"]}),
        _ => json!({"quality": "Poor", "error_tags": ["Hallucination", "ImgCapMismatch"]}),
    }
}

pub fn queue_ids(queue: &Value) -> Vec<String> {
    queue["items"].as_array().unwrap().iter().map(|i| i["conversation_id"].as_str().unwrap().to_string()).collect()
}
