// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path-integrated attributions.
//!
//! All integrals use the right-endpoint Riemann rule: the integrand is
//! evaluated at `alpha = k / m` for `k = 1..=m` and averaged.
//!
//! * Attention attribution scales every post-softmax attention matrix by
//!   `alpha` jointly, takes the gradient w.r.t. each scaled matrix and
//!   multiplies the averaged gradient elementwise with the true weights.
//! * Input attribution (integrated gradients) interpolates token embeddings
//!   between a baseline and the true embeddings and sums the per-coordinate
//!   attribution over the hidden dimension.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Arch, AttentionMaps, Baseline, Family, Interpolation, LossTarget, ModelBundle, ScaledGradients, TokenId,
};

pub const DEFAULT_ATTENTION_STEPS: usize = 20;
pub const DEFAULT_IG_STEPS: usize = 50;

/// Loss used for corpus-level sweeps. `PredictedLogit` sums the per-step
/// attributions over every generation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    TaskLoss,
    PredictedLogit,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_loss" => Ok(LossKind::TaskLoss),
            "predicted_logit" => Ok(LossKind::PredictedLogit),
            other => Err(Error::domain(format!("unknown loss target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MaxAbs,
    SumAbs,
}

impl Reduction {
    pub fn apply(self, values: ArrayView2<'_, f64>) -> f64 {
        match self {
            Reduction::MaxAbs => values.iter().fold(0.0, |acc, v| acc.max(v.abs())),
            Reduction::SumAbs => values.iter().map(|v| v.abs()).sum(),
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_abs" => Ok(Reduction::MaxAbs),
            "sum_abs" => Ok(Reduction::SumAbs),
            other => Err(Error::domain(format!("unknown reduction `{other}`"))),
        }
    }
}

/// Attribution of one head's attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub family: Family,
    pub layer: usize,
    pub head: usize,
    /// `[tgt × src]`, same shape as the attention matrix.
    pub values: Array2<f64>,
    pub m_steps: usize,
}

/// Attributions for every head of every family from one Riemann sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionSet {
    pub values: AttentionMaps,
    pub m_steps: usize,
}

impl AttributionSet {
    pub fn get(&self, family: Family, layer: usize, head: usize) -> Option<ArrayView2<'_, f64>> {
        let t = self.values.get(&family)?.get(layer)?;
        (head < t.dim().0).then(|| t.index_axis(Axis(0), head))
    }

    fn add_assign(&mut self, other: &AttributionSet) {
        for (fam, layers) in &mut self.values {
            for (dst, src) in layers.iter_mut().zip(&other.values[fam]) {
                *dst += src;
            }
        }
    }
}

fn check_steps(m_steps: usize) -> Result<()> {
    if m_steps == 0 {
        return Err(Error::domain("m_steps must be at least 1"));
    }
    Ok(())
}

/// Right-endpoint Riemann mean of a matrix-valued integrand over `[0, 1]`.
fn riemann_mean<F>(m_steps: usize, mut integrand: F) -> Result<Array2<f64>>
where
    F: FnMut(f64) -> Result<Array2<f64>>,
{
    let mut acc: Option<Array2<f64>> = None;
    for k in 1..=m_steps {
        let g = integrand(k as f64 / m_steps as f64)?;
        match &mut acc {
            Some(a) => *a += &g,
            None => acc = Some(g),
        }
    }
    Ok(acc.expect("m_steps >= 1") / m_steps as f64)
}

/// Attention attribution for every head under a single loss target.
pub fn attention_attribution_all(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    m_steps: usize,
    loss: LossTarget,
) -> Result<AttributionSet> {
    check_steps(m_steps)?;
    let capture = bundle.forward_with_capture(input_ids, output_ids)?;
    let mut grad_sum: Option<AttentionMaps> = None;
    for k in 1..=m_steps {
        let req = Interpolation::attention(k as f64 / m_steps as f64, loss);
        let out = bundle.interpolated_forward(input_ids, output_ids, &req)?;
        let ScaledGradients::Attention(grads) = out.grads else {
            unreachable!("attention scaling returns attention gradients")
        };
        match &mut grad_sum {
            None => grad_sum = Some(grads),
            Some(acc) => {
                for (fam, layers) in acc.iter_mut() {
                    for (a, g) in layers.iter_mut().zip(&grads[fam]) {
                        *a += g;
                    }
                }
            }
        }
    }
    let mut values = grad_sum.expect("m_steps >= 1");
    for (fam, layers) in values.iter_mut() {
        for (l, g) in layers.iter_mut().enumerate() {
            *g /= m_steps as f64;
            *g *= &capture.attn[fam][l];
        }
    }
    Ok(AttributionSet { values, m_steps })
}

/// Attention attribution of head `(family, layer, head)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_attribution(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    family: Family,
    layer: usize,
    head: usize,
    m_steps: usize,
    loss: LossTarget,
) -> Result<AttributionMatrix> {
    bundle.check_head(family, layer, head)?;
    let set = attention_attribution_all(bundle, input_ids, output_ids, m_steps, loss)?;
    let values = set.get(family, layer, head).expect("checked coordinates").to_owned();
    Ok(AttributionMatrix {
        family,
        layer,
        head,
        values,
        m_steps,
    })
}

/// Attribution set for a corpus-level loss kind; `PredictedLogit` sums the
/// per-step sets over all generation steps.
pub fn attribution_sweep(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    m_steps: usize,
    loss: LossKind,
) -> Result<AttributionSet> {
    match loss {
        LossKind::TaskLoss => attention_attribution_all(bundle, input_ids, output_ids, m_steps, LossTarget::TaskLoss),
        LossKind::PredictedLogit => {
            if output_ids.is_empty() {
                return Err(Error::DegenerateInput("no generation steps to attribute".into()));
            }
            let mut total: Option<AttributionSet> = None;
            for step in 0..output_ids.len() {
                let set = attention_attribution_all(
                    bundle,
                    input_ids,
                    output_ids,
                    m_steps,
                    LossTarget::PredictedLogit { step },
                )?;
                match &mut total {
                    None => total = Some(set),
                    Some(t) => t.add_assign(&set),
                }
            }
            Ok(total.expect("at least one step"))
        }
    }
}

/// Corpus-averaged, per-family normalized head importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImportance {
    /// `[layers × heads]` per family, divided by the family maximum.
    pub scores: BTreeMap<Family, Array2<f64>>,
    /// `[layers × heads]` per family, corpus means before normalization.
    pub raw: BTreeMap<Family, Array2<f64>>,
    pub num_examples_averaged: usize,
    pub reduction: Reduction,
    pub m_steps: usize,
    pub loss: LossKind,
}

impl HeadImportance {
    /// `(layer, head)` of the family's highest-scoring head.
    pub fn top_head(&self, family: Family) -> Option<(usize, usize)> {
        let m = self.scores.get(&family)?;
        let mut best: Option<((usize, usize), f64)> = None;
        for ((l, h), &v) in m.indexed_iter() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((l, h), v));
            }
        }
        best.map(|(idx, _)| idx)
    }
}

/// Reduced `|attribution|` per head for one example.
pub fn reduced_head_scores(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    m_steps: usize,
    loss: LossKind,
    reduction: Reduction,
) -> Result<BTreeMap<Family, Array2<f64>>> {
    let set = attribution_sweep(bundle, input_ids, output_ids, m_steps, loss)?;
    Ok(set
        .values
        .iter()
        .map(|(&fam, layers)| {
            let mut m = Array2::zeros((layers.len(), bundle.num_heads));
            for (l, t) in layers.iter().enumerate() {
                for h in 0..bundle.num_heads {
                    m[[l, h]] = reduction.apply(t.index_axis(Axis(0), h));
                }
            }
            (fam, m)
        })
        .collect())
}

/// Head importance over `corpus`, given as `(input_ids, output_ids)` pairs.
///
/// Per-example scores are combined cell by cell in sorted order, so the
/// result is bit-identical under any permutation of the corpus.
pub fn head_importance(
    bundle: &ModelBundle,
    corpus: &[(&[TokenId], &[TokenId])],
    m_steps: usize,
    loss: LossKind,
    reduction: Reduction,
) -> Result<HeadImportance> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_steps(m_steps)?;
    let score = |&(input, output): &(&[TokenId], &[TokenId])| {
        reduced_head_scores(bundle, input, output, m_steps, loss, reduction)
    };
    #[cfg(feature = "parallel")]
    let per_example: Vec<_> = {
        use rayon::prelude::*;
        corpus.par_iter().map(score).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_example: Vec<_> = corpus.iter().map(score).collect::<Result<_>>()?;

    let n = per_example.len() as f64;
    let mut raw = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for &fam in bundle.families() {
        let shape = per_example[0][&fam].raw_dim();
        let mut mean = Array2::zeros(shape);
        for ((l, h), cell) in mean.indexed_iter_mut() {
            let mut vals: Vec<f64> = per_example.iter().map(|e| e[&fam][[l, h]]).collect();
            vals.sort_by(f64::total_cmp);
            *cell = vals.iter().sum::<f64>() / n;
        }
        let max = mean.iter().copied().fold(0.0, f64::max);
        let norm = if max > 0.0 { &mean / max } else { mean.clone() };
        raw.insert(fam, mean);
        scores.insert(fam, norm);
    }
    Ok(HeadImportance {
        scores,
        raw,
        num_examples_averaged: corpus.len(),
        reduction,
        m_steps,
        loss,
    })
}

/// Integrated-gradients scores for one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub step: usize,
    /// Input tokens first, then the output tokens emitted before `step`.
    pub scores: Vec<f64>,
    pub baseline: Baseline,
    pub m_steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|sum(scores) - (f_input - f_baseline)|`
    pub completeness_residual: f64,
}

/// A differentiable scalar function of a `[positions × dim]` matrix.
pub trait Scorer {
    fn value_and_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
}

/// `f(x) = Σ w ⊙ x`, the linear case where integrated gradients are exact.
#[derive(Debug, Clone)]
pub struct LinearScorer {
    pub weights: Array2<f64>,
}

impl Scorer for LinearScorer {
    fn value_and_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        if x.dim() != self.weights.dim() {
            return Err(Error::domain("input shape does not match the scorer"));
        }
        Ok(((x * &self.weights).sum(), self.weights.clone()))
    }
}

/// Output of [`integrated_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    /// One score per row, summed over columns.
    pub scores: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_residual: f64,
}

fn finish_ig(
    input: &Array2<f64>,
    baseline: &Array2<f64>,
    mean_grad: &Array2<f64>,
    f_input: f64,
    f_baseline: f64,
) -> IgResult {
    let scores: Vec<f64> = ((input - baseline) * mean_grad).sum_axis(Axis(1)).to_vec();
    let total: f64 = scores.iter().sum();
    IgResult {
        completeness_residual: (total - (f_input - f_baseline)).abs(),
        scores,
        f_input,
        f_baseline,
    }
}

/// Integrated gradients of `scorer` from `baseline` to `input`.
pub fn integrated_gradients(
    scorer: &impl Scorer,
    input: &Array2<f64>,
    baseline: &Array2<f64>,
    m_steps: usize,
) -> Result<IgResult> {
    check_steps(m_steps)?;
    if input.dim() != baseline.dim() {
        return Err(Error::domain("input and baseline shapes differ"));
    }
    let diff = input - baseline;
    let mean = riemann_mean(m_steps, |alpha| {
        let point = baseline + &(&diff * alpha);
        scorer.value_and_grad(&point).map(|(_, g)| g)
    })?;
    let f_input = scorer.value_and_grad(input)?.0;
    let f_baseline = scorer.value_and_grad(baseline)?.0;
    Ok(finish_ig(input, baseline, &mean, f_input, f_baseline))
}

/// Integrated gradients of the logit predicted at `step` (or another loss
/// target) w.r.t. the input tokens and the previously emitted tokens.
pub fn input_attribution(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    step: usize,
    m_steps: usize,
    baseline: Baseline,
    loss: LossTarget,
) -> Result<AttributionVector> {
    check_steps(m_steps)?;
    if step >= output_ids.len() {
        return Err(Error::index(format!(
            "step {step} outside output of length {}",
            output_ids.len()
        )));
    }
    let layout = bundle.layout_for(input_ids, output_ids)?;
    let span = bundle.attributed_span(&layout, output_ids.len(), Some(step))?;
    let (x, b) = bundle.span_embeddings(&layout, &span, baseline);

    let mut req = Interpolation::embedding(1.0, loss, baseline);
    req.step = Some(step);
    let mut f_input = f64::NAN;
    let mean = riemann_mean(m_steps, |alpha| {
        req.alpha = alpha;
        let out = bundle.interpolated_forward(input_ids, output_ids, &req)?;
        if alpha == 1.0 {
            f_input = out.loss;
        }
        let ScaledGradients::Embedding { encoder, decoder } = out.grads else {
            unreachable!("embedding scaling returns embedding gradients")
        };
        let mut rows = Array2::zeros((span.len(), bundle.hidden_dim));
        if let Some(enc) = encoder {
            rows.slice_mut(s![..span.enc, ..])
                .assign(&enc.slice(s![..span.enc, ..]));
        }
        rows.slice_mut(s![span.enc.., ..])
            .assign(&decoder.slice(s![span.dec.clone(), ..]));
        Ok(rows)
    })?;
    req.alpha = 0.0;
    let f_baseline = bundle.interpolated_forward(input_ids, output_ids, &req)?.loss;
    let ig = finish_ig(&x, &b, &mean, f_input, f_baseline);
    Ok(AttributionVector {
        step,
        scores: ig.scores,
        baseline,
        m_steps,
        f_input,
        f_baseline,
        completeness_residual: ig.completeness_residual,
    })
}

/// Token × token interaction scores over the concatenated sequence.
///
/// Encoder-decoder grids index input tokens first (`0..n`) and then output
/// steps (`n..n+m`); decoder-only grids index prompt and continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub values: Array2<f64>,
    pub input_len: usize,
    pub output_len: usize,
    pub m_steps: usize,
    pub loss: LossKind,
}

/// Sums an attribution set over layers and heads onto the token grid.
pub fn interaction_from_set(arch: Arch, set: &AttributionSet, input_len: usize, output_len: usize) -> Array2<f64> {
    let sum_heads = |fam: Family| -> Option<Array2<f64>> {
        let layers = set.values.get(&fam)?;
        let mut acc: Option<Array2<f64>> = None;
        for t in layers {
            let s = t.sum_axis(Axis(0));
            match &mut acc {
                Some(a) => *a += &s,
                None => acc = Some(s),
            }
        }
        acc
    };
    match arch {
        Arch::DecoderOnly => sum_heads(Family::DecoderSelf).expect("decoder self-attention"),
        Arch::EncoderDecoder => {
            let (n, m) = (input_len, output_len);
            let mut grid = Array2::zeros((n + m, n + m));
            if let Some(enc) = sum_heads(Family::EncoderSelf) {
                grid.slice_mut(s![..n, ..n]).assign(&enc);
            }
            if let Some(cross) = sum_heads(Family::Cross) {
                grid.slice_mut(s![n.., ..n]).assign(&cross.slice(s![..m, ..]));
            }
            if let Some(dec) = sum_heads(Family::DecoderSelf) {
                grid.slice_mut(s![n.., n..]).assign(&dec.slice(s![..m, ..m]));
            }
            grid
        }
    }
}

pub fn interaction_matrix(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    m_steps: usize,
    loss: LossKind,
) -> Result<InteractionMatrix> {
    let set = attribution_sweep(bundle, input_ids, output_ids, m_steps, loss)?;
    Ok(InteractionMatrix {
        values: interaction_from_set(bundle.arch, &set, input_ids.len(), output_ids.len()),
        input_len: input_ids.len(),
        output_len: output_ids.len(),
        m_steps,
        loss,
    })
}

/// Shannon entropy (nats) of `|scores|` normalized to a distribution.
pub fn entropy_of(scores: &[f64]) -> Result<f64> {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    Ok(-scores
        .iter()
        .map(|s| s.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

pub fn attribution_entropy(vec: &AttributionVector) -> Result<f64> {
    entropy_of(&vec.scores)
}
