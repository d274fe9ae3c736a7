// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON shapes returned by the API.

use std::collections::BTreeMap;

use attnscope_core::corpus::Direction;
use attnscope_core::model::{Arch, Baseline, Family};
use attnscope_core::projection::ProjectionParams;
use attnscope_core::store::CreationParams;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Significant digits kept for floats in transit.
pub const SIGNIFICANT_DIGITS: usize = 6;

/// Rounds `v` to `digits` significant decimal digits. Non-finite values
/// pass through unchanged.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.*e}", digits.saturating_sub(1)).parse().unwrap_or(v)
}

pub fn round6(v: f64) -> f64 {
    round_sig(v, SIGNIFICANT_DIGITS)
}

pub fn round_vec(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    v.into_iter().map(round6).collect()
}

pub fn round_matrix(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| round_vec(r.iter().copied())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub direction: Option<Direction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub model_id: String,
    pub arch: Arch,
    pub families: Vec<Family>,
    pub layers: BTreeMap<Family, usize>,
    pub heads: usize,
    pub dataset_id: String,
    pub num_examples: usize,
    pub attributes: Vec<AttributeInfo>,
    pub params: CreationParams,
    pub projection: Option<ProjectionParams>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSummary {
    pub id: String,
    pub point: Option<[f64; 2]>,
    pub attributes: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub id: String,
    pub input_text: String,
    pub reference_text: Option<String>,
    pub output_text: Option<String>,
    pub input_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
    pub attributes: BTreeMap<String, Option<f64>>,
    pub point: Option<[f64; 2]>,
    /// One point per decoder step, in the same frame as `point` when the
    /// projection supports out-of-sample placement.
    pub detail_points: Vec<[f64; 2]>,
}

/// Decoder heatmap: one split cell per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderImportance {
    /// Top subcell; absent for decoder-only models.
    pub cross: Option<Vec<Vec<f64>>>,
    /// Bottom subcell.
    pub decoder_self: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImportancePayload {
    pub encoder: Option<Vec<Vec<f64>>>,
    pub decoder: DecoderImportance,
    pub num_examples_averaged: usize,
    pub reduction: attnscope_core::attribution::Reduction,
    pub m_steps: usize,
    pub loss: attnscope_core::attribution::LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Attention,
    Attribution,
    Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSide {
    Input,
    Output,
}

/// One labelled heatmap row with its key tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    /// `encoder_self`, `cross`, `decoder_self`, `attribution` or `interaction`.
    pub label: String,
    /// Sequence position of the query token the row belongs to.
    pub query_position: Option<usize>,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub m_steps: usize,
    pub baseline: Baseline,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePayload {
    pub example_id: String,
    pub mode: Mode,
    pub input_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
    pub rows: Vec<TokenRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionSummary>,
    /// Attribution steps used for interaction scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPayload {
    pub id: u64,
    pub scope: crate::jobs::Scope,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
