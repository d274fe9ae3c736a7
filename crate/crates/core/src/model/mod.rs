// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uniform facade over the generative transformers the workbench inspects.
//!
//! A [`ModelBundle`] is immutable once loaded. Instrumented passes build a
//! fresh tape per call, so a bundle can be shared across threads.

mod config;
mod generate;
mod tokenizer;
mod transformer;
mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

pub use config::{Arch, ModelConfig, BUILTIN_MODELS};
pub use generate::{GenerationParams, Strategy};
pub use tokenizer::{TokenId, Tokenizer};
pub use transformer::AttentionProbe;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use transformer::{ForwardSpec, Trace};
use weights::Weights;

/// Attention family. Encoder-decoder models have all three, decoder-only
/// models only [`Family::DecoderSelf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::EncoderSelf => "encoder_self",
            Family::DecoderSelf => "decoder_self",
            Family::Cross => "cross",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_self" => Ok(Family::EncoderSelf),
            "decoder_self" => Ok(Family::DecoderSelf),
            "cross" => Ok(Family::Cross),
            other => Err(Error::domain(format!("unknown attention family `{other}`"))),
        }
    }
}

/// Per-family, per-layer `[heads × tgt × src]` tensors.
pub type AttentionMaps = BTreeMap<Family, Vec<Array3<f64>>>;

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model_id: String,
    pub arch: Arch,
    pub num_layers_enc: usize,
    pub num_layers_dec: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub max_positions: usize,
    pub tokenizer: Tokenizer,
    config: ModelConfig,
    weights: Weights,
}

const CONFIG_FILE: &str = "config.json";
const VOCAB_FILE: &str = "vocab.json";
const WEIGHTS_FILE: &str = "model.safetensors";

/// Resolves a built-in model name or a local directory holding
/// `config.json` and optionally `vocab.json` and `model.safetensors`.
///
/// Without a weight file the parameters are drawn from the config's seed,
/// so loading is deterministic either way.
pub fn load_model(model_id: &str) -> Result<ModelBundle> {
    if let Some(cfg) = ModelConfig::builtin(model_id) {
        return ModelBundle::from_config(model_id, cfg, Tokenizer::builtin(), None);
    }
    let dir = Path::new(model_id);
    if !dir.is_dir() {
        return Err(Error::Load {
            id: model_id.to_string(),
            reason: format!(
                "not a built-in model ({}) and not a local model directory",
                BUILTIN_MODELS.join(", ")
            ),
        });
    }
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::Load {
        id: model_id.to_string(),
        reason: format!("{}: {e}", cfg_path.display()),
    })?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Load {
        id: model_id.to_string(),
        reason: format!("{}: {e}", cfg_path.display()),
    })?;
    let vocab = dir.join(VOCAB_FILE);
    let tokenizer = if vocab.exists() {
        Tokenizer::load(&vocab)?
    } else {
        Tokenizer::builtin()
    };
    let weights = dir.join(WEIGHTS_FILE);
    ModelBundle::from_config(model_id, cfg, tokenizer, weights.exists().then_some(weights.as_path()))
}

impl ModelBundle {
    pub fn from_config(
        model_id: &str,
        mut config: ModelConfig,
        tokenizer: Tokenizer,
        weight_file: Option<&Path>,
    ) -> Result<Self> {
        let arch = config.validate()?;
        let vocab = config.vocab_size.unwrap_or(tokenizer.vocab_size());
        if vocab < tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size {vocab} is smaller than the tokenizer's {}",
                tokenizer.vocab_size()
            )));
        }
        let mut weights = Weights::init(&config, arch, vocab);
        if let Some(path) = weight_file {
            weights.load_into(path).map_err(|e| Error::Load {
                id: model_id.to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(ModelBundle {
            model_id: model_id.to_string(),
            arch,
            num_layers_enc: config.num_layers_enc,
            num_layers_dec: config.num_layers_dec,
            num_heads: config.num_heads,
            hidden_dim: config.hidden_dim,
            max_positions: config.max_positions,
            tokenizer,
            config,
            weights,
        })
    }

    /// Writes a directory that [`load_model`] reads back to an identical bundle.
    pub fn save_pretrained(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let mut cfg = self.config.clone();
        cfg.vocab_size = Some(self.weights.tok_emb.nrows());
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::path(&path, e))?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))?;
        self.weights.clone().save(&dir.join(WEIGHTS_FILE))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn families(&self) -> &'static [Family] {
        match self.arch {
            Arch::EncoderDecoder => &[Family::EncoderSelf, Family::DecoderSelf, Family::Cross],
            Arch::DecoderOnly => &[Family::DecoderSelf],
        }
    }

    pub fn num_layers(&self, family: Family) -> usize {
        match family {
            Family::EncoderSelf => self.num_layers_enc,
            Family::DecoderSelf | Family::Cross => self.num_layers_dec,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.tok_emb.nrows()
    }

    pub(crate) fn check_head(&self, family: Family, layer: usize, head: usize) -> Result<()> {
        if !self.families().contains(&family) {
            return Err(Error::index(format!(
                "family {family} does not exist in a {:?} model",
                self.arch
            )));
        }
        if layer >= self.num_layers(family) || head >= self.num_heads {
            return Err(Error::index(format!(
                "{family} layer {layer} head {head} outside {} layers × {} heads",
                self.num_layers(family),
                self.num_heads
            )));
        }
        Ok(())
    }

    fn token_embeddings(&self, ids: &[TokenId]) -> Array2<f64> {
        let d = self.hidden_dim;
        let mut out = Array2::zeros((ids.len(), d));
        for (mut row, &id) in out.outer_iter_mut().zip(ids) {
            row.assign(&self.weights.tok_emb.row(id as usize));
        }
        out
    }

    fn baseline_embeddings(&self, len: usize, baseline: Baseline) -> Array2<f64> {
        match baseline {
            Baseline::Zero => Array2::zeros((len, self.hidden_dim)),
            Baseline::PadToken => self.token_embeddings(&vec![self.tokenizer.pad_id(); len]),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let vocab = self.vocab_size();
        match ids.iter().find(|&&i| i as usize >= vocab) {
            Some(bad) => Err(Error::domain(format!("token id {bad} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    /// Builds the teacher-forced layout for `(input, output)`.
    fn layout(&self, input_ids: &[TokenId], output_ids: &[TokenId]) -> Result<Layout> {
        self.check_ids(input_ids)?;
        self.check_ids(output_ids)?;
        if input_ids.iter().all(|&i| i == self.tokenizer.pad_id()) {
            return Err(Error::DegenerateInput("input has no non-padding tokens".into()));
        }
        let n = input_ids.len();
        let m = output_ids.len();
        match self.arch {
            Arch::EncoderDecoder => {
                let longest = n.max(m.max(1));
                if longest > self.max_positions {
                    return Err(Error::InputTooLong {
                        len: longest,
                        max: self.max_positions,
                    });
                }
                let mut dec = vec![self.tokenizer.bos_id()];
                dec.extend_from_slice(&output_ids[..m.saturating_sub(1)]);
                Ok(Layout {
                    enc: input_ids.to_vec(),
                    dec,
                    first_step_pos: 0,
                })
            }
            Arch::DecoderOnly => {
                if n + m > self.max_positions {
                    return Err(Error::InputTooLong {
                        len: n + m,
                        max: self.max_positions,
                    });
                }
                let mut dec = input_ids.to_vec();
                dec.extend_from_slice(output_ids);
                Ok(Layout {
                    enc: Vec::new(),
                    dec,
                    first_step_pos: n - 1,
                })
            }
        }
    }

    fn trace(
        &self,
        layout: &Layout,
        enc_tok: Array2<f64>,
        dec_tok: Array2<f64>,
        alpha: f64,
        probes: &[AttentionProbe],
    ) -> Trace {
        transformer::run(
            &self.weights,
            self.num_heads,
            ForwardSpec {
                enc_ids: &layout.enc,
                dec_ids: &layout.dec,
                enc_tok,
                dec_tok,
                alpha,
                probes,
                pad_id: self.tokenizer.pad_id(),
            },
        )
    }

    fn plain_trace(&self, layout: &Layout) -> Trace {
        let enc = self.token_embeddings(&layout.enc);
        let dec = self.token_embeddings(&layout.dec);
        self.trace(layout, enc, dec, 1.0, &[])
    }

    /// Instrumented teacher-forced forward returning every hidden state and
    /// attention tensor.
    pub fn forward_with_capture(&self, input_ids: &[TokenId], output_ids: &[TokenId]) -> Result<CaptureResult> {
        let layout = self.layout(input_ids, output_ids)?;
        let trace = self.plain_trace(&layout);
        let t = &trace.tape;
        let attn = trace
            .attn
            .iter()
            .map(|(&fam, layers)| {
                let tensors = layers
                    .iter()
                    .map(|heads| {
                        let first = t.value(heads[0].probs);
                        let (r, c) = first.dim();
                        let mut out = Array3::zeros((heads.len(), r, c));
                        for (h, node) in heads.iter().enumerate() {
                            out.index_axis_mut(ndarray::Axis(0), h).assign(t.value(node.probs));
                        }
                        out
                    })
                    .collect();
                (fam, tensors)
            })
            .collect();
        let m = output_ids.len();
        let logits = t.value(trace.logits);
        let step_logits = logits
            .slice(ndarray::s![layout.first_step_pos..layout.first_step_pos + m, ..])
            .to_owned();
        Ok(CaptureResult {
            arch: self.arch,
            input_ids: input_ids.to_vec(),
            output_ids: output_ids.to_vec(),
            enc_hidden: trace.enc_hidden.iter().map(|&i| t.value(i).clone()).collect(),
            dec_hidden: trace.dec_hidden.iter().map(|&i| t.value(i).clone()).collect(),
            attn,
            step_logits,
            first_step_pos: layout.first_step_pos,
            decoder_ids: layout.dec,
            pad_id: self.tokenizer.pad_id(),
        })
    }

    /// Forward pass with one quantity scaled by `alpha`, differentiated
    /// w.r.t. that scaled quantity.
    pub fn interpolated_forward(
        &self,
        input_ids: &[TokenId],
        output_ids: &[TokenId],
        req: &Interpolation,
    ) -> Result<InterpolatedOutput> {
        if !(0.0..=1.0).contains(&req.alpha) || req.alpha.is_nan() {
            return Err(Error::domain(format!("alpha {} outside [0, 1]", req.alpha)));
        }
        let layout = self.layout(input_ids, output_ids)?;
        let m = output_ids.len();
        if let LossTarget::PredictedLogit { step } = req.loss {
            if step >= m {
                return Err(Error::index(format!("step {step} outside output of length {m}")));
            }
        }
        if req.loss == LossTarget::TaskLoss && m == 0 {
            return Err(Error::DegenerateInput("task loss needs a non-empty output".into()));
        }

        let mut enc_tok = self.token_embeddings(&layout.enc);
        let mut dec_tok = self.token_embeddings(&layout.dec);
        let mut attn_alpha = 1.0;
        let mut attn_probes = Vec::new();
        let span = self.attributed_span(&layout, m, req.interpolation_step())?;
        match req.target {
            ScaleTarget::Attention => {
                attn_alpha = req.alpha;
            }
            ScaleTarget::InputEmbedding => {
                let base_enc = self.baseline_embeddings(enc_tok.nrows(), req.baseline);
                let base_dec = self.baseline_embeddings(dec_tok.nrows(), req.baseline);
                for i in 0..span.enc {
                    let row = &base_enc.row(i) + &((&enc_tok.row(i) - &base_enc.row(i)) * req.alpha);
                    enc_tok.row_mut(i).assign(&row);
                }
                for i in span.dec.clone() {
                    let row = &base_dec.row(i) + &((&dec_tok.row(i) - &base_dec.row(i)) * req.alpha);
                    dec_tok.row_mut(i).assign(&row);
                }
            }
        }
        for probe in &req.probes {
            match *probe {
                Probe::Attention(p) => attn_probes.push(p),
                Probe::Embedding(p) => {
                    let target = match p.side {
                        Side::Encoder => &mut enc_tok,
                        Side::Decoder => &mut dec_tok,
                    };
                    if p.position >= target.nrows() || p.dim >= target.ncols() {
                        return Err(Error::index("embedding probe outside the sequence"));
                    }
                    target[[p.position, p.dim]] += p.delta;
                }
            }
        }

        let trace = self.trace(&layout, enc_tok, dec_tok, attn_alpha, &attn_probes);
        let mut tape = trace.tape;
        let loss = match req.loss {
            LossTarget::TaskLoss => {
                let targets: Vec<usize> = output_ids.iter().map(|&i| i as usize).collect();
                let logits = if m == layout.dec.len() {
                    trace.logits
                } else {
                    // Decoder-only: score the continuation positions only.
                    slice_rows(&mut tape, trace.logits, layout.first_step_pos, m)
                };
                tape.cross_entropy(logits, &targets)
            }
            LossTarget::PredictedLogit { step } => {
                tape.pick(trace.logits, layout.first_step_pos + step, output_ids[step] as usize)
            }
        };
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let grads = match req.target {
            ScaleTarget::Attention => ScaledGradients::Attention(
                trace
                    .attn
                    .iter()
                    .map(|(&fam, layers)| {
                        let tensors = layers
                            .iter()
                            .map(|heads| {
                                let (r, c) = tape.value(heads[0].scaled).dim();
                                let mut out = Array3::zeros((heads.len(), r, c));
                                for (h, node) in heads.iter().enumerate() {
                                    out.index_axis_mut(ndarray::Axis(0), h)
                                        .assign(&grads.of(&tape, node.scaled));
                                }
                                out
                            })
                            .collect();
                        (fam, tensors)
                    })
                    .collect(),
            ),
            ScaleTarget::InputEmbedding => ScaledGradients::Embedding {
                encoder: trace.enc_tok.map(|id| grads.of(&tape, id)),
                decoder: grads.of(&tape, trace.dec_tok),
            },
        };
        Ok(InterpolatedOutput { loss: value, grads })
    }

    /// Positions whose embeddings are interpolated (and attributed) when the
    /// prefix is cut at `step`.
    pub(crate) fn attributed_span(&self, layout: &Layout, m: usize, step: Option<usize>) -> Result<Span> {
        if let Some(s) = step {
            if s >= m.max(1) {
                return Err(Error::index(format!("step {s} outside output of length {m}")));
            }
        }
        Ok(match self.arch {
            Arch::EncoderDecoder => Span {
                enc: layout.enc.len(),
                dec: 1..1 + step.unwrap_or(layout.dec.len() - 1),
            },
            Arch::DecoderOnly => Span {
                enc: 0,
                dec: 0..step.map_or(layout.dec.len(), |s| layout.first_step_pos + 1 + s),
            },
        })
    }

    pub(crate) fn layout_for(&self, input_ids: &[TokenId], output_ids: &[TokenId]) -> Result<Layout> {
        self.layout(input_ids, output_ids)
    }

    /// Embedding rows of the attributed span, as `(input, baseline)` pairs.
    pub(crate) fn span_embeddings(
        &self,
        layout: &Layout,
        span: &Span,
        baseline: Baseline,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut ids: Vec<TokenId> = layout.enc[..span.enc].to_vec();
        ids.extend_from_slice(&layout.dec[span.dec.clone()]);
        (
            self.token_embeddings(&ids),
            self.baseline_embeddings(ids.len(), baseline),
        )
    }

    /// Scalar loss of an un-instrumented forward pass.
    pub fn loss(&self, input_ids: &[TokenId], output_ids: &[TokenId], loss: LossTarget) -> Result<f64> {
        let req = Interpolation {
            alpha: 1.0,
            target: ScaleTarget::Attention,
            loss,
            baseline: Baseline::Zero,
            step: None,
            probes: Vec::new(),
        };
        self.interpolated_forward(input_ids, output_ids, &req).map(|o| o.loss)
    }

    /// Autoregressive decoding from `input_ids`.
    pub fn generate(&self, input_ids: &[TokenId], params: &GenerationParams) -> Result<Generation> {
        generate::generate(self, input_ids, params)
    }

    /// Logits for the next token after `output_ids`.
    pub(crate) fn next_logits(&self, input_ids: &[TokenId], output_ids: &[TokenId]) -> Result<Vec<f64>> {
        let layout = match self.arch {
            Arch::EncoderDecoder => {
                let mut l = self.layout(input_ids, &[])?;
                l.dec = vec![self.tokenizer.bos_id()];
                l.dec.extend_from_slice(output_ids);
                if l.dec.len() > self.max_positions {
                    return Err(Error::InputTooLong {
                        len: l.dec.len(),
                        max: self.max_positions,
                    });
                }
                l
            }
            Arch::DecoderOnly => self.layout(input_ids, output_ids)?,
        };
        let trace = self.plain_trace(&layout);
        let logits = trace.tape.value(trace.logits);
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }
}

/// Row slice expressed as a product with a selection matrix.
fn slice_rows(tape: &mut Tape, node: NodeId, start: usize, len: usize) -> NodeId {
    let total = tape.value(node).nrows();
    let sel = Array2::from_shape_fn((len, total), |(r, c)| if c == start + r { 1.0 } else { 0.0 });
    let sel = tape.leaf(sel);
    tape.matmul(sel, node)
}

/// Teacher-forced token layout of one example.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc: Vec<TokenId>,
    pub dec: Vec<TokenId>,
    /// Decoder position whose logits predict output token 0.
    pub first_step_pos: usize,
}

/// Interpolated positions: the first `enc` encoder tokens and the decoder
/// positions in `dec`.
#[derive(Debug, Clone)]
pub(crate) struct Span {
    pub enc: usize,
    pub dec: std::ops::Range<usize>,
}

impl Span {
    pub fn len(&self) -> usize {
        self.enc + self.dec.len()
    }
}

#[derive(Debug, Clone)]
pub struct CaptureResult {
    pub arch: Arch,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    /// Per encoder layer `[n × hidden]`; empty for decoder-only models.
    pub enc_hidden: Vec<Array2<f64>>,
    /// Per decoder layer `[positions × hidden]`. Encoder-decoder models have
    /// one position per output step; decoder-only models cover prompt and
    /// continuation.
    pub dec_hidden: Vec<Array2<f64>>,
    pub attn: AttentionMaps,
    /// `[m × vocab]`, row `t` predicts `output_ids[t]`.
    pub step_logits: Array2<f64>,
    /// Decoder position whose hidden state predicts output token 0.
    pub first_step_pos: usize,
    /// Token ids fed to the decoder stack, one per `dec_hidden` row.
    pub decoder_ids: Vec<TokenId>,
    pub pad_id: TokenId,
}

impl CaptureResult {
    pub fn attention(&self, family: Family, layer: usize, head: usize) -> Option<ArrayView2<'_, f64>> {
        let t = self.attn.get(&family)?.get(layer)?;
        (head < t.dim().0).then(|| t.index_axis(ndarray::Axis(0), head))
    }

    /// Final-layer decoder states at the positions predicting each output token.
    pub fn step_states(&self) -> Array2<f64> {
        let last = self.dec_hidden.last().expect("at least one decoder layer");
        let m = self.output_ids.len();
        last.slice(ndarray::s![self.first_step_pos..self.first_step_pos + m, ..])
            .to_owned()
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub output_ids: Vec<TokenId>,
    /// One row per emitted token.
    pub step_logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTarget {
    Attention,
    InputEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossTarget {
    /// Summed cross-entropy of the whole output sequence.
    TaskLoss,
    /// Pre-softmax logit of the emitted token at `step`.
    PredictedLogit { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Zero,
    PadToken,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Baseline::Zero),
            "pad" | "pad_token" => Ok(Baseline::PadToken),
            other => Err(Error::domain(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Additive nudge to one (already interpolated) token-embedding coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingProbe {
    pub side: Side,
    pub position: usize,
    pub dim: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    Attention(AttentionProbe),
    Embedding(EmbeddingProbe),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub alpha: f64,
    pub target: ScaleTarget,
    pub loss: LossTarget,
    /// Only read for [`ScaleTarget::InputEmbedding`].
    pub baseline: Baseline,
    /// Restricts embedding interpolation to the prefix visible at this
    /// step. Defaults to the predicted-logit step, else the whole sequence.
    pub step: Option<usize>,
    /// Additive nudges applied on top of the interpolation, for derivative checks.
    pub probes: Vec<Probe>,
}

impl Interpolation {
    pub fn attention(alpha: f64, loss: LossTarget) -> Self {
        Interpolation {
            alpha,
            target: ScaleTarget::Attention,
            loss,
            baseline: Baseline::Zero,
            step: None,
            probes: Vec::new(),
        }
    }

    pub fn embedding(alpha: f64, loss: LossTarget, baseline: Baseline) -> Self {
        Interpolation {
            alpha,
            target: ScaleTarget::InputEmbedding,
            loss,
            baseline,
            step: None,
            probes: Vec::new(),
        }
    }

    fn interpolation_step(&self) -> Option<usize> {
        match (self.step, self.loss) {
            (Some(s), _) => Some(s),
            (None, LossTarget::PredictedLogit { step }) => Some(step),
            (None, LossTarget::TaskLoss) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ScaledGradients {
    Attention(AttentionMaps),
    /// Gradients w.r.t. the interpolated token embeddings.
    Embedding {
        encoder: Option<Array2<f64>>,
        decoder: Array2<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct InterpolatedOutput {
    pub loss: f64,
    pub grads: ScaledGradients,
}
