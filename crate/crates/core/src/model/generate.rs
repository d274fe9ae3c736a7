// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and beam-search decoding.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Arch, Generation, ModelBundle, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationParams {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            strategy: Strategy::Greedy,
            beam_size: 1,
            max_new_tokens: 12,
        }
    }
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationParams {
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Beam && self.beam_size < 2 {
            return Err(Error::domain("beam search needs beam_size >= 2"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::domain("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    values.iter().map(|v| v - log_z).collect()
}

/// Output positions still available after the input.
fn budget(bundle: &ModelBundle, input_len: usize, requested: usize) -> Result<usize> {
    match bundle.arch {
        Arch::EncoderDecoder => {
            if input_len > bundle.max_positions {
                return Err(Error::InputTooLong {
                    len: input_len,
                    max: bundle.max_positions,
                });
            }
            Ok(requested.min(bundle.max_positions))
        }
        Arch::DecoderOnly => {
            if input_len >= bundle.max_positions {
                return Err(Error::InputTooLong {
                    len: input_len + 1,
                    max: bundle.max_positions,
                });
            }
            Ok(requested.min(bundle.max_positions - input_len))
        }
    }
}

pub(super) fn generate(bundle: &ModelBundle, input_ids: &[TokenId], params: &GenerationParams) -> Result<Generation> {
    params.validate()?;
    if input_ids.is_empty() {
        return Err(Error::DegenerateInput("empty input".into()));
    }
    let limit = budget(bundle, input_ids.len(), params.max_new_tokens)?;
    let eos = bundle.tokenizer.eos_id();
    match params.strategy {
        Strategy::Greedy => {
            let mut out = Vec::new();
            let mut rows = Vec::new();
            while out.len() < limit {
                let logits = bundle.next_logits(input_ids, &out)?;
                let next = argmax(&logits) as TokenId;
                rows.push(logits);
                out.push(next);
                if next == eos {
                    break;
                }
            }
            let vocab = bundle.vocab_size();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let step_logits = Array2::from_shape_vec((out.len(), vocab), flat).expect("one row per emitted token");
            Ok(Generation {
                output_ids: out,
                step_logits,
            })
        }
        Strategy::Beam => {
            let output_ids = beam_search(bundle, input_ids, params.beam_size, limit, eos)?;
            let capture = bundle.forward_with_capture(input_ids, &output_ids)?;
            Ok(Generation {
                output_ids,
                step_logits: capture.step_logits,
            })
        }
    }
}

/// Beam search ranking hypotheses by summed log-probability. Ties keep the
/// earlier-expanded hypothesis, so results are deterministic.
fn beam_search(
    bundle: &ModelBundle,
    input_ids: &[TokenId],
    width: usize,
    limit: usize,
    eos: TokenId,
) -> Result<Vec<TokenId>> {
    let mut beams: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    for _ in 0..limit {
        let mut candidates: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for (seq, score) in &beams {
            let logp = log_softmax(&bundle.next_logits(input_ids, seq)?);
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut next = seq.clone();
                next.push(tok as TokenId);
                candidates.push((next, score + logp[tok]));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        beams.clear();
        for (seq, score) in candidates {
            if seq.last() == Some(&eos) {
                finished.push((seq, score));
            } else if beams.len() < width {
                beams.push((seq, score));
            }
            if beams.len() == width {
                break;
            }
        }
        if beams.is_empty() || finished.len() >= width {
            break;
        }
    }
    finished.extend(beams);
    finished.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(finished.into_iter().next().map(|(s, _)| s).unwrap_or_default())
}
