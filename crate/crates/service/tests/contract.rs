mod common;

use std::panic::{self, AssertUnwindSafe};

use axum::http::{Method, StatusCode};
use serde_json::{json, Value};

use mmdialog_core::postproc::ReasonCode;
use mmdialog_core::seedset::{Characteristic, ErrorTag, QualityLabel};
use mmdialog_core::workspace::Workspace;
use mmdialog_service::{AppState, OPENAPI};

fn names<T: serde::Serialize>(all: &[T]) -> Vec<Value> {
    all.iter().map(|v| serde_json::to_value(v).unwrap()).collect()
}

#[test]
fn label_vocabularies_match_the_store() {
    let doc: Value = serde_json::from_str(OPENAPI).unwrap();
    let schemas = &doc["components"]["schemas"];
    assert_eq!(schemas["Quality"]["enum"].as_array().unwrap(), &names(&QualityLabel::ALL));
    assert_eq!(schemas["Characteristic"]["enum"].as_array().unwrap(), &names(&Characteristic::ALL));
    assert_eq!(schemas["ErrorTag"]["enum"].as_array().unwrap(), &names(&ErrorTag::ALL));
    assert_eq!(schemas["ReasonCode"]["enum"].as_array().unwrap(), &names(&ReasonCode::ALL));
}

#[test]
fn every_operation_lists_its_error_shape() {
    let doc: Value = serde_json::from_str(OPENAPI).unwrap();
    for (path, ops) in doc["paths"].as_object().unwrap() {
        for (method, op) in ops.as_object().unwrap() {
            for (status, res) in op["responses"].as_object().unwrap() {
                let schema = &res["content"]["application/json"]["schema"];
                if !status.starts_with('2') {
                    assert_eq!(schema["$ref"], "#/components/schemas/Error", "{method} {path} {status}");
                }
            }
        }
    }
}

#[tokio::test]
async fn the_schema_check_rejects_bad_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(Workspace::init(dir.path(), common::loop_config()).unwrap(), common::sessions()).unwrap();
    let client = common::Client::new(state);
    let good = client.call(Method::GET, "/api/healthz", None, None, None).await;
    panic::set_hook(Box::new(|_| {}));
    for bad in [
        json!({"status": "ok"}),
        {
            let mut b = good.body.clone();
            b["completed"] = json!(-1);
            b
        },
        {
            let mut b = good.body.clone();
            b["extra"] = json!(true);
            b
        },
    ] {
        let outcome =
            panic::catch_unwind(AssertUnwindSafe(|| client.check_contract(&Method::GET, "/api/healthz", StatusCode::OK, &bad)));
        assert!(outcome.is_err(), "{bad} was accepted");
    }
    let undocumented = panic::catch_unwind(AssertUnwindSafe(|| {
        client.check_contract(&Method::GET, "/api/healthz", StatusCode::IM_A_TEAPOT, &good.body)
    }));
    let _ = panic::take_hook();
    assert!(undocumented.is_err());
}
