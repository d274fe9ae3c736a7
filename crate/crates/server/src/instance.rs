// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instance queries: attention rows, input attributions and interaction
//! rows for one example.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use attnscope_core::attribution::{input_attribution, interaction_matrix, LossKind};
use attnscope_core::model::{Arch, Baseline, Family, LossTarget};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::jobs::MAX_STEPS;
use crate::payload::{round_vec, AttributionSummary, InstancePayload, Mode, TokenRow, TokenSide};
use crate::state::{AppState, LazyKey, LazyValue};

/// A parsed `GET /api/instance` query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceQuery {
    pub example_id: String,
    pub mode: Mode,
    pub family: Option<Family>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub token_index: Option<usize>,
    pub token_side: Option<TokenSide>,
    pub step: Option<usize>,
    /// Overrides the cache's Riemann step count.
    pub m_steps: Option<usize>,
    /// Overrides the cache's interaction loss.
    pub loss: Option<LossKind>,
    /// Overrides the cache's attribution baseline.
    pub baseline: Option<Baseline>,
}

const KEYS: &[&str] = &[
    "example_id",
    "mode",
    "family",
    "layer",
    "head",
    "token_index",
    "token_side",
    "step",
    "m_steps",
    "loss",
    "baseline",
];

fn parse<T: FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    q.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| ApiError::unprocessable(format!("invalid `{key}` value `{v}`: {e}")))
        })
        .transpose()
}

fn parse_enum<T: for<'de> Deserialize<'de>>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|v| {
            serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| ApiError::unprocessable(format!("invalid `{key}` value `{v}`")))
        })
        .transpose()
}

fn require<T>(v: Option<T>, key: &str, mode: Mode) -> ApiResult<T> {
    v.ok_or_else(|| ApiError::unprocessable(format!("`{key}` is required in {mode:?} mode").to_lowercase()))
}

impl InstanceQuery {
    /// Parses raw query parameters and checks the per-mode invariants.
    pub fn from_params(q: &HashMap<String, String>) -> ApiResult<Self> {
        if let Some(k) = q.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ApiError::unprocessable(format!("unknown query parameter `{k}`")));
        }
        let example_id = q
            .get("example_id")
            .cloned()
            .ok_or_else(|| ApiError::unprocessable("`example_id` is required"))?;
        let mode: Mode = parse_enum(q, "mode")?.ok_or_else(|| ApiError::unprocessable("`mode` is required"))?;
        let query = InstanceQuery {
            example_id,
            mode,
            family: parse_enum(q, "family")?,
            layer: parse(q, "layer")?,
            head: parse(q, "head")?,
            token_index: parse(q, "token_index")?,
            token_side: parse_enum(q, "token_side")?,
            step: parse(q, "step")?,
            m_steps: parse(q, "m_steps")?,
            loss: parse_enum(q, "loss")?,
            baseline: parse_enum(q, "baseline")?,
        };
        match mode {
            Mode::Attention => {
                require(query.family, "family", mode)?;
                require(query.layer, "layer", mode)?;
                require(query.head, "head", mode)?;
                require(query.token_index, "token_index", mode)?;
                require(query.token_side, "token_side", mode)?;
            }
            Mode::Attribution => {
                require(query.step, "step", mode)?;
            }
            Mode::Interaction => {
                require(query.token_index, "token_index", mode)?;
                require(query.token_side, "token_side", mode)?;
            }
        }
        if let Some(m) = query.m_steps {
            if !(1..=MAX_STEPS).contains(&m) {
                return Err(ApiError::unprocessable(format!("m_steps must be in 1..={MAX_STEPS}")));
            }
        }
        Ok(query)
    }

    /// Query string for this query, the inverse of [`InstanceQuery::from_params`].
    pub fn to_query_string(&self) -> String {
        let v = serde_json::to_value(self).expect("serializable query");
        let mut parts = Vec::new();
        for (k, v) in v.as_object().expect("object") {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            parts.push(format!("{k}={}", encode(&s)));
        }
        parts.join("&")
    }
}

fn encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

fn check_token(side: TokenSide, index: usize, n: usize, m: usize) -> ApiResult<()> {
    let len = match side {
        TokenSide::Input => n,
        TokenSide::Output => m,
    };
    if index >= len {
        return Err(ApiError::unprocessable(format!(
            "token_index {index} outside the {} sequence of length {len}",
            if side == TokenSide::Input { "input" } else { "output" }
        )));
    }
    Ok(())
}

/// Answers an instance query, computing or reusing lazy results.
pub async fn answer(state: &AppState, q: &InstanceQuery) -> ApiResult<InstancePayload> {
    let shared = state.inner.clone();
    let pos = shared
        .corpus
        .position(&q.example_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown example `{}`", q.example_id)))?;
    let ex = &shared.corpus.examples[pos];
    let tok = &shared.bundle.tokenizer;
    let (n, m) = (ex.input_ids.len(), ex.output_ids.len());
    let mut payload = InstancePayload {
        example_id: ex.id.clone(),
        mode: q.mode,
        input_tokens: tok.tokens(&ex.input_ids),
        output_tokens: tok.tokens(&ex.output_ids),
        rows: Vec::new(),
        attribution: None,
        m_steps: None,
    };
    match q.mode {
        Mode::Attention => {
            let (family, layer, head) = (q.family.unwrap(), q.layer.unwrap(), q.head.unwrap());
            let (side, index) = (q.token_side.unwrap(), q.token_index.unwrap());
            let bundle = &shared.bundle;
            if !bundle.families().contains(&family) {
                return Err(ApiError::unprocessable(format!(
                    "family {family} does not exist in this model"
                )));
            }
            check_token(side, index, n, m)?;
            let families: &[Family] = match (bundle.arch, side) {
                (Arch::EncoderDecoder, TokenSide::Input) => &[Family::EncoderSelf],
                (Arch::EncoderDecoder, TokenSide::Output) => &[Family::DecoderSelf, Family::Cross],
                (Arch::DecoderOnly, _) => &[Family::DecoderSelf],
            };
            for &f in std::iter::once(&family).chain(families) {
                if layer >= bundle.num_layers(f) || head >= bundle.num_heads {
                    return Err(ApiError::unprocessable(format!(
                        "{f} layer {layer} head {head} outside {} layers × {} heads",
                        bundle.num_layers(f),
                        bundle.num_heads
                    )));
                }
            }
            let (input, output) = (ex.input_ids.clone(), ex.output_ids.clone());
            let worker = shared.clone();
            let families = families.to_vec();
            payload.rows = tokio::task::spawn_blocking(move || -> attnscope_core::Result<Vec<TokenRow>> {
                let cap = worker.bundle.forward_with_capture(&input, &output)?;
                let tok = &worker.bundle.tokenizer;
                let query = match side {
                    TokenSide::Input => index,
                    TokenSide::Output => cap.first_step_pos + index,
                };
                Ok(families
                    .iter()
                    .map(|&f| {
                        let a = cap.attention(f, layer, head).expect("checked head");
                        let row = a.row(query);
                        let (keys, len) = match f {
                            Family::EncoderSelf | Family::Cross => (tok.tokens(&cap.input_ids), row.len()),
                            Family::DecoderSelf => (tok.tokens(&cap.decoder_ids[..=query]), query + 1),
                        };
                        TokenRow {
                            label: f.to_string(),
                            query_position: Some(query),
                            tokens: keys,
                            values: round_vec(row.iter().take(len).copied()),
                        }
                    })
                    .collect())
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        }
        Mode::Attribution => {
            let step = q.step.unwrap();
            if step >= m {
                return Err(ApiError::unprocessable(format!(
                    "step {step} outside output of length {m}"
                )));
            }
            let snap = state.snapshot();
            let m_steps = q.m_steps.unwrap_or(snap.params.ig_steps);
            let baseline = q.baseline.unwrap_or(snap.params.baseline);
            let key = LazyKey::Attribution {
                example: pos,
                step,
                m_steps,
                baseline,
            };
            let worker = shared.clone();
            let value = shared
                .lazy
                .get_or_compute(key, move || {
                    let ex = &worker.corpus.examples[pos];
                    let v = input_attribution(
                        &worker.bundle,
                        &ex.input_ids,
                        &ex.output_ids,
                        step,
                        m_steps,
                        baseline,
                        LossTarget::PredictedLogit { step },
                    )?;
                    let value = LazyValue::Attribution(Arc::new(v));
                    worker.persist_lazy(&key, &value);
                    Ok(value)
                })
                .await?;
            let LazyValue::Attribution(v) = value else {
                return Err(ApiError::internal("cache entry has the wrong kind"));
            };
            let mut keys = payload.input_tokens.clone();
            keys.extend_from_slice(&payload.output_tokens[..step]);
            payload.rows.push(TokenRow {
                label: "attribution".into(),
                query_position: None,
                tokens: keys,
                values: round_vec(v.scores.iter().copied()),
            });
            payload.attribution = Some(AttributionSummary {
                m_steps: v.m_steps,
                baseline: v.baseline,
                f_input: crate::payload::round6(v.f_input),
                f_baseline: crate::payload::round6(v.f_baseline),
                completeness_residual: crate::payload::round6(v.completeness_residual),
            });
        }
        Mode::Interaction => {
            let (side, index) = (q.token_side.unwrap(), q.token_index.unwrap());
            check_token(side, index, n, m)?;
            let snap = state.snapshot();
            let m_steps = q.m_steps.unwrap_or(snap.params.attn_steps);
            let loss = q.loss.unwrap_or(snap.params.loss);
            let key = LazyKey::Interaction {
                example: pos,
                m_steps,
                loss,
            };
            let worker = shared.clone();
            let value = shared
                .lazy
                .get_or_compute(key, move || {
                    let ex = &worker.corpus.examples[pos];
                    let im = interaction_matrix(&worker.bundle, &ex.input_ids, &ex.output_ids, m_steps, loss)?;
                    let value = LazyValue::Interaction(Arc::new(im.values));
                    worker.persist_lazy(&key, &value);
                    Ok(value)
                })
                .await?;
            let LazyValue::Interaction(grid) = value else {
                return Err(ApiError::internal("cache entry has the wrong kind"));
            };
            let row = match side {
                TokenSide::Input => index,
                TokenSide::Output => n + index,
            };
            let mut keys = payload.input_tokens.clone();
            keys.extend_from_slice(&payload.output_tokens);
            payload.rows.push(TokenRow {
                label: "interaction".into(),
                query_position: Some(row),
                tokens: keys,
                values: round_vec(grid.row(row).iter().copied()),
            });
            payload.m_steps = Some(m_steps);
        }
    }
    Ok(payload)
}
