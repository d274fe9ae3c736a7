// SPDX-License-Identifier: MIT OR Apache-2.0

//! Example embeddings and their 2-D layouts.
//!
//! A corpus is projected once with [`project_corpus`]; the returned
//! [`CorpusProjector`] is immutable and can place the decoder states of any
//! single example into the same frame with [`project_decoder_steps`].

mod tsne;
mod umap;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, CaptureResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Umap,
    Tsne,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Umap => "umap",
            Method::Tsne => "tsne",
        }
    }

    pub fn supports_transform(self) -> bool {
        matches!(self, Method::Umap)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "umap" => Ok(Method::Umap),
            "tsne" | "t-sne" => Ok(Method::Tsne),
            other => Err(Error::Config(format!("unknown projection method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionParams {
    pub method: Method,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub perplexity: f64,
    pub seed: u64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            method: Method::Umap,
            n_neighbors: 15,
            min_dist: 0.1,
            perplexity: 30.0,
            seed: 42,
        }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::domain(format!(
                "n_neighbors must be at least 2, got {}",
                self.n_neighbors
            )));
        }
        if !(0.0..1.0).contains(&self.min_dist) {
            return Err(Error::domain(format!(
                "min_dist must lie in [0, 1), got {}",
                self.min_dist
            )));
        }
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return Err(Error::domain(format!(
                "perplexity must be positive, got {}",
                self.perplexity
            )));
        }
        Ok(())
    }

    /// Smallest corpus the chosen method accepts.
    pub fn min_points(&self) -> usize {
        match self.method {
            Method::Umap => self.n_neighbors + 1,
            Method::Tsne => self.perplexity.floor() as usize + 1,
        }
    }

    /// Shrinks neighbourhood parameters so a corpus of `n` points is accepted.
    pub fn clamped_to(mut self, n: usize) -> Self {
        let cap = n.saturating_sub(1);
        self.n_neighbors = self.n_neighbors.min(cap).max(2);
        if self.perplexity >= n as f64 {
            self.perplexity = (cap as f64).max(1.0);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    EncoderMean,
    DecoderMean,
}

impl EmbeddingSource {
    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::EncoderDecoder => EmbeddingSource::EncoderMean,
            Arch::DecoderOnly => EmbeddingSource::DecoderMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub points: Vec<[f64; 2]>,
    /// Per example, one point per output token.
    pub detail_points: Vec<Vec<[f64; 2]>>,
    pub params: ProjectionParams,
    pub embedding_source: EmbeddingSource,
}

/// Mean of the final-layer hidden states of the summarising stack,
/// skipping padding positions.
pub fn example_embedding(capture: &CaptureResult) -> Result<Array1<f64>> {
    example_embedding_at(capture, None)
}

/// Like [`example_embedding`] but reads layer `layer` (0-based) instead of
/// the last one.
pub fn example_embedding_at(capture: &CaptureResult, layer: Option<usize>) -> Result<Array1<f64>> {
    let (stack, ids) = match capture.arch {
        Arch::EncoderDecoder => (&capture.enc_hidden, &capture.input_ids),
        Arch::DecoderOnly => (&capture.dec_hidden, &capture.decoder_ids),
    };
    let states = match layer {
        None => stack.last(),
        Some(l) => stack.get(l),
    }
    .ok_or_else(|| Error::index(format!("layer {layer:?} of {} captured", stack.len())))?;
    let keep: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != capture.pad_id)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateInput("no non-padding positions to average".into()));
    }
    let mut sum = Array1::zeros(states.ncols());
    for &i in &keep {
        sum += &states.row(i);
    }
    Ok(sum / keep.len() as f64)
}

#[derive(Debug, Clone)]
enum Fitted {
    Umap(Box<umap::UmapModel>),
    Tsne,
}

/// A fitted corpus layout.
#[derive(Debug, Clone)]
pub struct CorpusProjector {
    params: ProjectionParams,
    points: Array2<f64>,
    fitted: Fitted,
}

impl CorpusProjector {
    pub fn params(&self) -> &ProjectionParams {
        &self.params
    }

    /// `[N × 2]` corpus coordinates.
    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point_list(&self) -> Vec<[f64; 2]> {
        self.points.rows().into_iter().map(|r| [r[0], r[1]]).collect()
    }

    pub fn supports_transform(&self) -> bool {
        matches!(self.fitted, Fitted::Umap(_))
    }

    /// Places arbitrary vectors in the corpus frame when the method allows
    /// it, otherwise lays them out on their own.
    pub fn project_steps(&self, steps: &Array2<f64>) -> Result<Array2<f64>> {
        if steps.nrows() == 0 {
            return Err(Error::DegenerateInput("no decoder steps to project".into()));
        }
        let out = match &self.fitted {
            Fitted::Umap(model) => {
                if steps.ncols() != model.data.ncols() {
                    return Err(Error::domain(format!(
                        "step vectors have dimension {}, corpus has {}",
                        steps.ncols(),
                        model.data.ncols()
                    )));
                }
                model.transform(steps)
            }
            Fitted::Tsne => local_layout(steps, &self.params),
        };
        finite(out)
    }

    pub fn into_result(self, detail_points: Vec<Vec<[f64; 2]>>, source: EmbeddingSource) -> ProjectionResult {
        ProjectionResult {
            points: self.point_list(),
            detail_points,
            params: self.params,
            embedding_source: source,
        }
    }
}

fn local_layout(steps: &Array2<f64>, params: &ProjectionParams) -> Array2<f64> {
    let m = steps.nrows();
    if m == 1 {
        return Array2::zeros((1, 2));
    }
    let perplexity = params.perplexity.min((m - 1) as f64 / 3.0).max(1.0);
    tsne::fit(steps, perplexity, params.seed)
}

fn finite(points: Array2<f64>) -> Result<Array2<f64>> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(points)
    } else {
        Err(Error::DegenerateInput(
            "projection diverged to non-finite coordinates".into(),
        ))
    }
}

/// Fits a 2-D layout with one row per input vector.
pub fn project_corpus(vectors: &Array2<f64>, params: &ProjectionParams) -> Result<CorpusProjector> {
    params.validate()?;
    let need = params.min_points();
    if vectors.nrows() < need {
        return Err(Error::CorpusTooSmall {
            got: vectors.nrows(),
            need,
        });
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("embedding vectors contain non-finite values"));
    }
    let (points, fitted) = match params.method {
        Method::Umap => {
            let model = umap::UmapModel::fit(vectors, params.n_neighbors, params.min_dist, params.seed);
            (model.embedding.clone(), Fitted::Umap(Box::new(model)))
        }
        Method::Tsne => (tsne::fit(vectors, params.perplexity, params.seed), Fitted::Tsne),
    };
    Ok(CorpusProjector {
        params: *params,
        points: finite(points)?,
        fitted,
    })
}

/// One 2-D point per output token of `capture`.
pub fn project_decoder_steps(projector: &CorpusProjector, capture: &CaptureResult) -> Result<Vec<[f64; 2]>> {
    if capture.output_ids.is_empty() {
        return Err(Error::DegenerateInput("empty output sequence".into()));
    }
    let pts = projector.project_steps(&capture.step_states())?;
    Ok(pts.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}

/// Stacks equally sized vectors into an `[N × d]` matrix.
pub fn stack(vectors: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = vectors.first().map_or(0, |v| v.len());
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::domain("embedding vectors differ in length"));
    }
    let views: Vec<_> = vectors.iter().map(|v| v.view().insert_axis(Axis(0))).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, 0)));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::domain(e.to_string()))
}

pub(crate) fn pairwise_sq_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validate() {
        assert!(ProjectionParams::default().validate().is_ok());
        let bad = ProjectionParams {
            n_neighbors: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ProjectionParams {
            min_dist: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clamping_admits_small_corpora() {
        let p = ProjectionParams::default().clamped_to(10);
        assert_eq!(p.n_neighbors, 9);
        assert!(p.min_points() <= 10);
        let t = ProjectionParams {
            method: Method::Tsne,
            ..Default::default()
        }
        .clamped_to(10);
        assert!(t.min_points() <= 10);
    }

    #[test]
    fn method_parses() {
        assert_eq!("UMAP".parse::<Method>().unwrap(), Method::Umap);
        assert_eq!("tsne".parse::<Method>().unwrap(), Method::Tsne);
        assert!("pca".parse::<Method>().is_err());
    }
}
