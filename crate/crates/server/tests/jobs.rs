// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::time::{Duration, Instant};

use attnscope_core::model::load_model;
use attnscope_core::pipeline::compute_projection;
use attnscope_core::projection::ProjectionParams;
use attnscope_core::store::{load_artifacts, ArtifactStore};
use attnscope_server::AppState;
use axum::http::StatusCode;
use common::*;
use serde_json::{json, Value};

async fn points(state: &AppState) -> Vec<Value> {
    let (_, all) = get(state, "/api/examples").await;
    all.as_array().unwrap().iter().map(|e| e["point"].clone()).collect()
}

async fn status(state: &AppState, id: u64) -> Value {
    let (st, job) = get(state, &format!("/api/jobs/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    job
}

async fn wait(state: &AppState, id: u64) -> Value {
    let start = Instant::now();
    loop {
        let job = status(state, id).await;
        if matches!(job["status"].as_str(), Some("done" | "failed")) {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {id} stuck: {job}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reprojection_becomes_visible_only_when_done() {
    let dir = fresh_cache("tiny-seq2seq");
    let state = open(dir.path());
    let before = points(&state).await;

    let (st, job) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "projection", "params": {"seed": 7}})),
    )
    .await;
    assert_eq!(st, StatusCode::ACCEPTED);
    let id = job["id"].as_u64().unwrap();
    loop {
        // Points are read before the status, so a job that is not done yet
        // must not have published anything.
        let seen = points(&state).await;
        let job = status(&state, id).await;
        match job["status"].as_str().unwrap() {
            "done" => break,
            "queued" | "running" => assert_eq!(seen, before),
            other => panic!("unexpected status {other}: {job}"),
        }
    }
    let after = points(&state).await;
    assert_ne!(after, before);

    // The served points equal a direct engine call with the same params.
    let loaded = load_artifacts(dir.path()).unwrap();
    let bundle = load_model("tiny-seq2seq").unwrap();
    let params = ProjectionParams {
        seed: 7,
        ..Default::default()
    };
    let direct = compute_projection(
        &bundle,
        &loaded.corpus,
        loaded.artifacts.embeddings.as_ref().unwrap(),
        &params,
    )
    .unwrap();
    for (served, d) in after.iter().zip(&direct.points) {
        assert_pass_through(&floats(served), d);
    }
    // The cache on disk was updated too.
    assert_eq!(loaded.artifacts.projection.unwrap().params.seed, 7);
    let (_, meta) = get(&state, "/api/meta").await;
    assert_eq!(meta["projection"]["seed"], 7);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn identical_pending_requests_share_a_job() {
    let dir = fresh_cache("tiny-seq2seq");
    let state = open(dir.path());
    let body = json!({"scope": "importance", "params": {"m_steps": 3, "reduction": "sum_abs"}});
    let (_, a) = call(&state, "POST", "/api/recompute", Some(body.clone())).await;
    let (_, b) = call(&state, "POST", "/api/recompute", Some(body)).await;
    assert_eq!(a["id"], b["id"]);
    let (_, c) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "importance", "params": {"m_steps": 2}})),
    )
    .await;
    assert_ne!(a["id"], c["id"]);

    let done = wait(&state, a["id"].as_u64().unwrap()).await;
    assert_eq!(done["status"], "done");
    assert_eq!(done["progress"], 1.0);
    let done = wait(&state, c["id"].as_u64().unwrap()).await;
    assert_eq!(done["status"], "done");
    let (_, h) = get(&state, "/api/head_importance").await;
    assert_eq!(h["m_steps"], 2);

    // Once finished, the same request starts a new job.
    let (_, d) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "importance", "params": {"m_steps": 2}})),
    )
    .await;
    assert_ne!(d["id"], c["id"]);
    wait(&state, d["id"].as_u64().unwrap()).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_job_leaves_the_cache_intact() {
    let dir = fresh_cache("tiny-seq2seq");
    let mut loaded = load_artifacts(dir.path()).unwrap();
    loaded.artifacts.embeddings.as_mut().unwrap()[[0, 0]] = f64::NAN;
    let store = ArtifactStore::open(dir.path()).unwrap();
    let manifest_before = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let state = AppState::new(loaded, load_model("tiny-seq2seq").unwrap(), Some(store));
    let before = points(&state).await;

    let (_, job) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "projection", "params": {"seed": 3}})),
    )
    .await;
    let job = wait(&state, job["id"].as_u64().unwrap()).await;
    assert_eq!(job["status"], "failed");
    assert!(!job["error"].as_str().unwrap().is_empty());
    assert_eq!(points(&state).await, before);
    assert_eq!(
        std::fs::read(dir.path().join("manifest.json")).unwrap(),
        manifest_before
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn instance_job_fills_the_lazy_cache() {
    let dir = fresh_cache("tiny-causal");
    let state = open(dir.path());
    let (st, job) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "instance", "params": {"example_id": "c", "m_steps": 2}})),
    )
    .await;
    assert_eq!(st, StatusCode::ACCEPTED);
    assert_eq!(wait(&state, job["id"].as_u64().unwrap()).await["status"], "done");
    let (st, _) = get(
        &state,
        "/api/instance?example_id=c&mode=interaction&token_side=output&token_index=0&m_steps=2",
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(state.lazy().computations(), 0);
}

#[tokio::test]
async fn malformed_recompute_requests() {
    let dir = fresh_cache("tiny-seq2seq");
    let state = open(dir.path());
    let cases = [
        json!({"scope": "projection", "params": {"method": "pca"}}),
        json!({"scope": "projection", "params": {"n_neighbors": 1}}),
        json!({"scope": "projection", "params": {"colour": 1}}),
        json!({"scope": "projection", "params": [1, 2]}),
        json!({"scope": "importance", "params": {"m_steps": 0}}),
        json!({"scope": "importance", "params": {"loss": "hinge"}}),
        json!({"scope": "instance", "params": {}}),
        json!({"scope": "everything"}),
        json!("projection"),
    ];
    for body in cases {
        let (st, resp) = call(&state, "POST", "/api/recompute", Some(body.clone())).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{body}: {resp}");
    }
    let (st, _) = call(
        &state,
        "POST",
        "/api/recompute",
        Some(json!({"scope": "instance", "params": {"example_id": "zz"}})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = get(&state, "/api/jobs/999").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}
