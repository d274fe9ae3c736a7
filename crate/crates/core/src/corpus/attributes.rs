// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-example scalar attributes used to colour and filter the corpus view.

use serde::{Deserialize, Serialize};

use super::{rouge, Corpus, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
    #[default]
    Neutral,
}

pub trait AttributePlugin: Send + Sync {
    fn name(&self) -> &str;

    fn direction(&self) -> Direction {
        Direction::Neutral
    }

    /// Must be pure. An error marks the value absent for that example.
    fn compute(&self, example: &Example) -> Result<f64>;
}

/// Number of input tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct Length;

impl AttributePlugin for Length {
    fn name(&self) -> &str {
        "length"
    }

    fn compute(&self, example: &Example) -> Result<f64> {
        Ok(example.input_ids.len() as f64)
    }
}

/// Mean ROUGE-1/2/L F1 of the generated output against the reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct RougeAvg;

impl AttributePlugin for RougeAvg {
    fn name(&self) -> &str {
        "rouge_avg"
    }

    fn direction(&self) -> Direction {
        Direction::HigherBetter
    }

    fn compute(&self, example: &Example) -> Result<f64> {
        let fail = |reason: &str| Error::Attribute {
            name: self.name().into(),
            example: example.id.clone(),
            reason: reason.into(),
        };
        let reference = example
            .reference_text
            .as_deref()
            .ok_or_else(|| fail("no reference text"))?;
        let output = example
            .output_text
            .as_deref()
            .ok_or_else(|| fail("no generated output"))?;
        Ok(rouge::rouge_avg(output, reference))
    }
}

pub fn builtin_plugin(name: &str) -> Option<Box<dyn AttributePlugin>> {
    match name {
        "length" => Some(Box::new(Length)),
        "rouge_avg" => Some(Box::new(RougeAvg)),
        _ => None,
    }
}

pub const BUILTIN_ATTRIBUTES: &[&str] = &["length", "rouge_avg"];

/// Outcome of running one plugin over a corpus.
#[derive(Debug)]
pub struct AttributeColumn {
    pub name: String,
    pub direction: Direction,
    pub values: Vec<Option<f64>>,
    /// Per-example failures; the matching values are `None`.
    pub errors: Vec<Error>,
}

/// Runs `plugin` over every example and stores the column in the corpus.
/// Failures and non-finite results are recorded as absences, never zeros.
pub fn compute_attribute(corpus: &mut Corpus, plugin: &dyn AttributePlugin) -> AttributeColumn {
    let name = plugin.name().to_string();
    let mut values = Vec::with_capacity(corpus.examples.len());
    let mut errors = Vec::new();
    for ex in &mut corpus.examples {
        let v = match plugin.compute(ex) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                errors.push(Error::Attribute {
                    name: name.clone(),
                    example: ex.id.clone(),
                    reason: format!("non-finite value {v}"),
                });
                None
            }
            Err(e) => {
                errors.push(e);
                None
            }
        };
        ex.attributes.insert(name.clone(), v);
        values.push(v);
    }
    corpus.directions.insert(name.clone(), plugin.direction());
    AttributeColumn {
        name,
        direction: plugin.direction(),
        values,
        errors,
    }
}
