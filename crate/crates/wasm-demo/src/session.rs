// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain Rust side of the demo, usable without a JavaScript host.

use attnscope_core::attribution::{head_importance, input_attribution, LossKind, Reduction};
use attnscope_core::model::{load_model, Baseline, GenerationParams, LossTarget, ModelBundle, TokenId};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Engine(#[from] attnscope_core::Error),
    #[error("invalid {what}: {reason}")]
    Argument { what: &'static str, reason: String },
    #[error("run a prompt first")]
    NothingGenerated,
}

fn parse<T: std::str::FromStr>(what: &'static str, text: &str) -> Result<T, DemoError>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e: T::Err| DemoError::Argument {
        what,
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Generated {
    pub input_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Saliency {
    pub step: usize,
    pub target: String,
    /// Input tokens followed by the output tokens before `step`.
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub family: String,
    /// One row per layer, one column per head, scaled so the maximum is 1.
    pub scores: Vec<Vec<f64>>,
    pub top: Option<(usize, usize)>,
}

/// A model plus the most recent prompt and its greedy continuation.
#[derive(Debug, Clone)]
pub struct Session {
    bundle: ModelBundle,
    input_ids: Vec<TokenId>,
    output_ids: Vec<TokenId>,
}

impl Session {
    pub fn new(model: &str) -> Result<Self, DemoError> {
        Ok(Session {
            bundle: load_model(model)?,
            input_ids: Vec::new(),
            output_ids: Vec::new(),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.bundle.model_id
    }

    pub fn run(&mut self, text: &str, max_new_tokens: usize) -> Result<Generated, DemoError> {
        let input_ids = self.bundle.tokenizer.encode(text);
        if input_ids.is_empty() {
            return Err(DemoError::Argument {
                what: "prompt",
                reason: "no tokens".into(),
            });
        }
        let params = GenerationParams::greedy(max_new_tokens);
        params.validate()?;
        let generation = self.bundle.generate(&input_ids, &params)?;
        self.input_ids = input_ids;
        self.output_ids = generation.output_ids;
        Ok(Generated {
            input_tokens: self.bundle.tokenizer.tokens(&self.input_ids),
            output_tokens: self.bundle.tokenizer.tokens(&self.output_ids),
        })
    }

    fn require_output(&self) -> Result<(), DemoError> {
        if self.output_ids.is_empty() {
            Err(DemoError::NothingGenerated)
        } else {
            Ok(())
        }
    }

    pub fn attribution(&self, step: usize, m_steps: usize, baseline: &str) -> Result<Saliency, DemoError> {
        self.require_output()?;
        let baseline: Baseline = parse("baseline", baseline)?;
        let v = input_attribution(
            &self.bundle,
            &self.input_ids,
            &self.output_ids,
            step,
            m_steps,
            baseline,
            LossTarget::PredictedLogit { step },
        )?;
        let mut context = self.input_ids.clone();
        context.extend_from_slice(&self.output_ids[..step]);
        Ok(Saliency {
            step,
            target: self.bundle.tokenizer.token(self.output_ids[step]).to_string(),
            tokens: self.bundle.tokenizer.tokens(&context),
            scores: v.scores,
            f_input: v.f_input,
            f_baseline: v.f_baseline,
            completeness_residual: v.completeness_residual,
        })
    }

    pub fn head_importance(&self, m_steps: usize, reduction: &str) -> Result<Vec<Heatmap>, DemoError> {
        self.require_output()?;
        let reduction: Reduction = parse("reduction", reduction)?;
        let pair: [(&[TokenId], &[TokenId]); 1] = [(&self.input_ids, &self.output_ids)];
        let hi = head_importance(&self.bundle, &pair, m_steps, LossKind::TaskLoss, reduction)?;
        Ok(hi
            .scores
            .iter()
            .map(|(fam, m)| Heatmap {
                family: fam.as_str().to_string(),
                scores: m.outer_iter().map(|r| r.to_vec()).collect(),
                top: hi.top_head(*fam),
            })
            .collect())
    }
}
