// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP/JSON API over a precomputed artifact cache.
//!
//! Corpus-level artifacts are served from an immutable snapshot that
//! recompute jobs swap atomically. Per-example interaction and attribution
//! results are computed on first request, memoized per key and written
//! back to the cache directory.

mod error;
mod instance;
mod jobs;
pub mod payload;
mod state;

use std::collections::HashMap;
use std::net::SocketAddr;

use attnscope_core::model::Family;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};

pub use error::{ApiError, ApiResult, ServerError};
pub use instance::InstanceQuery;
pub use jobs::{RecomputeRequest, Scope, MAX_STEPS};
pub use state::{AppState, LazyKey, Snapshot};

use payload::{
    round6, round_matrix, AttributeInfo, DecoderImportance, ExampleDetail, ExampleSummary, HeadImportancePayload,
    InstancePayload, JobPayload, Meta,
};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/examples", get(examples))
        .route("/api/examples/{id}", get(example))
        .route("/api/head_importance", get(head_importance))
        .route("/api/instance", get(instance))
        .route("/api/recompute", post(recompute))
        .route("/api/jobs/{id}", get(job))
        .with_state(state)
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    state: AppState,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind {
            addr: addr.to_string(),
            source,
        })?;
    serve_on(state, listener, shutdown).await
}

/// Serves on an already bound listener.
pub async fn serve_on(
    state: AppState,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

fn point(p: &[f64; 2]) -> [f64; 2] {
    [round6(p[0]), round6(p[1])]
}

async fn meta(State(state): State<AppState>) -> Json<Meta> {
    let s = &state.inner;
    let snap = s.snapshot();
    let bundle = &s.bundle;
    let attributes = s
        .corpus
        .attribute_names()
        .into_iter()
        .map(|name| AttributeInfo {
            direction: s.corpus.directions.get(&name).copied(),
            name,
        })
        .collect();
    Json(Meta {
        model_id: s.manifest.model_id.clone(),
        arch: bundle.arch,
        families: bundle.families().to_vec(),
        layers: bundle.families().iter().map(|&f| (f, bundle.num_layers(f))).collect(),
        heads: bundle.num_heads,
        dataset_id: s.manifest.dataset_id.clone(),
        num_examples: s.corpus.len(),
        attributes,
        params: snap.params.clone(),
        projection: snap.projection.as_ref().map(|p| p.params),
        complete: s.manifest.complete,
    })
}

fn bound(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<f64>> {
    q.get(key)
        .map(|v| {
            v.parse::<f64>()
                .ok()
                .filter(|x| !x.is_nan())
                .ok_or_else(|| ApiError::bad_request(format!("`{key}` must be a number, got `{v}`")))
        })
        .transpose()
}

async fn examples(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Vec<ExampleSummary>>> {
    let s = &state.inner;
    let (min, max) = (bound(&q, "min")?, bound(&q, "max")?);
    let attr = q.get("attr");
    if attr.is_none() && (min.is_some() || max.is_some()) {
        return Err(ApiError::bad_request("`min` and `max` need `attr`"));
    }
    if let Some(a) = attr {
        if !s.corpus.attribute_names().contains(a) {
            return Err(ApiError::not_found(format!("unknown attribute `{a}`")));
        }
    }
    let snap = s.snapshot();
    let points = snap.projection.as_ref().map(|p| &p.points);
    let out = s
        .corpus
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| match attr {
            None => true,
            Some(a) => match e.attributes.get(a).copied().flatten() {
                None => false,
                Some(v) => min.is_none_or(|lo| v >= lo) && max.is_none_or(|hi| v <= hi),
            },
        })
        .map(|(i, e)| ExampleSummary {
            id: e.id.clone(),
            point: points.and_then(|p| p.get(i)).map(point),
            attributes: e.attributes.iter().map(|(k, v)| (k.clone(), v.map(round6))).collect(),
        })
        .collect();
    Ok(Json(out))
}

async fn example(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ExampleDetail>> {
    let s = &state.inner;
    let i = s
        .corpus
        .position(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown example `{id}`")))?;
    let e = &s.corpus.examples[i];
    let snap = s.snapshot();
    let tok = &s.bundle.tokenizer;
    Ok(Json(ExampleDetail {
        id: e.id.clone(),
        input_text: e.input_text.clone(),
        reference_text: e.reference_text.clone(),
        output_text: e.output_text.clone(),
        input_tokens: tok.tokens(&e.input_ids),
        output_tokens: tok.tokens(&e.output_ids),
        attributes: e.attributes.iter().map(|(k, v)| (k.clone(), v.map(round6))).collect(),
        point: snap.projection.as_ref().and_then(|p| p.points.get(i)).map(point),
        detail_points: snap
            .projection
            .as_ref()
            .and_then(|p| p.detail_points.get(i))
            .map(|d| d.iter().map(point).collect())
            .unwrap_or_default(),
    }))
}

async fn head_importance(State(state): State<AppState>) -> ApiResult<Json<HeadImportancePayload>> {
    let snap = state.snapshot();
    let Some(h) = snap.head_importance.as_ref() else {
        return Err(ApiError::conflict(format!(
            "head importance has not been computed for this cache; run `attnscope precompute --model {} --dataset <file> --output <cache dir>` or POST /api/recompute with scope `importance`",
            state.inner.manifest.model_id
        )));
    };
    let get = |f: Family| h.scores.get(&f).map(round_matrix);
    let decoder_self = get(Family::DecoderSelf)
        .ok_or_else(|| ApiError::conflict("head importance lacks decoder self-attention scores; rerun precompute"))?;
    Ok(Json(HeadImportancePayload {
        encoder: get(Family::EncoderSelf),
        decoder: DecoderImportance {
            cross: get(Family::Cross),
            decoder_self,
        },
        num_examples_averaged: h.num_examples_averaged,
        reduction: h.reduction,
        m_steps: h.m_steps,
        loss: h.loss,
    }))
}

async fn instance(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<InstancePayload>> {
    let query = InstanceQuery::from_params(&q)?;
    instance::answer(&state, &query).await.map(Json)
}

async fn recompute(
    State(state): State<AppState>,
    body: Result<Json<RecomputeRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<JobPayload>)> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let spec = jobs::resolve(&state.inner, &req)?;
    let id = state.inner.jobs.submit(spec);
    let job = state.inner.jobs.get(id).expect("submitted job exists");
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn job(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<JobPayload>> {
    state
        .inner
        .jobs
        .get(id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}
