// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use attnscope_core::corpus::FieldMap;
use attnscope_core::pipeline::{precompute, PrecomputeConfig};
use attnscope_core::store::CreationParams;
use attnscope_server::{router, AppState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const ROWS: &str = r#"{"key":"a","text":"the minister met the press on monday","summary":"minister met press"}
{"key":"b","text":"rain fell on the city for three days","summary":"three days of rain"}
{"key":"c","text":"a cat sat near the warm window","summary":null}
{"key":"d","text":"the team won the final match at home","summary":"team won final"}
{"key":"e","text":"prices rose again in the spring","summary":"prices rose"}
{"key":"f","text":"the river flooded the low fields near the old town","summary":"river flooded fields"}
{"key":"g","text":"new trains will run on the northern line","summary":"new trains"}
{"key":"h","text":"the school opened a library","summary":"school library"}
"#;

/// Builds a cache for `model` once per process and returns its directory.
pub fn base_cache(model: &'static str) -> PathBuf {
    static SEQ2SEQ: OnceLock<tempfile::TempDir> = OnceLock::new();
    static CAUSAL: OnceLock<tempfile::TempDir> = OnceLock::new();
    let cell = if model == "tiny-causal" { &CAUSAL } else { &SEQ2SEQ };
    cell.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("rows.jsonl");
        std::fs::write(&data, ROWS).unwrap();
        let cfg = PrecomputeConfig {
            model_id: model.into(),
            dataset: data,
            format: None,
            field_map: "input=text,reference=summary,id=key".parse::<FieldMap>().unwrap(),
            output: dir.path().join("cache"),
            params: CreationParams {
                attn_steps: 4,
                ig_steps: 8,
                ..Default::default()
            },
        };
        precompute(&cfg, &mut |_| {}).unwrap();
        dir
    })
    .path()
    .join("cache")
}

/// A private copy of the base cache, so tests that write do not race.
pub fn fresh_cache(model: &'static str) -> tempfile::TempDir {
    let base = base_cache(model);
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(&base).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

pub fn open(dir: &Path) -> AppState {
    AppState::open(dir).unwrap()
}

pub async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn get(state: &AppState, uri: &str) -> (StatusCode, Value) {
    call(state, "GET", uri, None).await
}

pub fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Served values are the direct ones rounded to six significant digits.
pub fn assert_pass_through(served: &[f64], direct: &[f64]) {
    assert_eq!(served.len(), direct.len(), "length mismatch");
    for (i, (s, d)) in served.iter().zip(direct).enumerate() {
        let tol = 6e-6 * d.abs() + 1e-12;
        assert!((s - d).abs() <= tol, "position {i}: served {s}, direct {d}");
    }
}

pub fn significant_digits(v: f64) -> usize {
    if v == 0.0 {
        return 0;
    }
    let s = format!("{:e}", v.abs());
    let mantissa = s.split('e').next().unwrap();
    mantissa.chars().filter(|c| c.is_ascii_digit()).count()
}
