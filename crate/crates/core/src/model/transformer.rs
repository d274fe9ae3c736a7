// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LN transformer forward pass recorded on an autodiff tape.
//!
//! Every post-softmax attention matrix passes through two extra nodes: a
//! scaling by `alpha` (the quantity gradients are reported against) and a
//! multiplication by its structural mask, so masked entries carry neither
//! weight nor gradient.

use std::collections::BTreeMap;

use ndarray::{s, Array2};

use super::weights::{AttentionWeights, Block, Linear, Norm, Weights};
use super::{Family, TokenId};
use crate::autodiff::{NodeId, Tape};

const LN_EPS: f64 = 1e-5;

/// An additive nudge to one scaled attention entry, used by gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionProbe {
    pub family: Family,
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

pub(crate) struct ForwardSpec<'a> {
    pub enc_ids: &'a [TokenId],
    pub dec_ids: &'a [TokenId],
    /// Token embeddings (without positions) for encoder and decoder inputs.
    pub enc_tok: Array2<f64>,
    pub dec_tok: Array2<f64>,
    pub alpha: f64,
    pub probes: &'a [AttentionProbe],
    pub pad_id: TokenId,
}

pub(crate) struct HeadNodes {
    pub probs: NodeId,
    pub scaled: NodeId,
}

pub(crate) struct Trace {
    pub tape: Tape,
    pub enc_tok: Option<NodeId>,
    pub dec_tok: NodeId,
    pub attn: BTreeMap<Family, Vec<Vec<HeadNodes>>>,
    pub enc_hidden: Vec<NodeId>,
    pub dec_hidden: Vec<NodeId>,
    pub logits: NodeId,
}

struct Ctx<'t> {
    tape: &'t mut Tape,
    heads: usize,
    alpha: f64,
    probes: &'t [AttentionProbe],
}

impl Ctx<'_> {
    fn linear(&mut self, x: NodeId, l: &Linear) -> NodeId {
        let w = self.tape.leaf(l.w.clone());
        let b = self.tape.leaf(l.b.clone());
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: NodeId, n: &Norm) -> NodeId {
        let g = self.tape.leaf(n.gamma.clone());
        let b = self.tape.leaf(n.beta.clone());
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(
        &mut self,
        w: &AttentionWeights,
        queries: NodeId,
        keys: NodeId,
        mask: &Array2<bool>,
        family: Family,
        layer: usize,
    ) -> (NodeId, Vec<HeadNodes>) {
        let q = self.linear(queries, &w.q);
        let k = self.linear(keys, &w.k);
        let v = self.linear(keys, &w.v);
        let dim = self.tape.value(q).ncols();
        let dh = dim / self.heads;
        let keep = mask.mapv(|m| if m { 1.0 } else { 0.0 });
        let mut outs = Vec::with_capacity(self.heads);
        let mut nodes = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let scores = self.tape.matmul_bt(qh, kh);
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = self.tape.softmax_rows(scores, mask);
            let mut scaled = self.tape.scale(probs, self.alpha);
            let mine = self
                .probes
                .iter()
                .filter(|p| p.family == family && p.layer == layer && p.head == h);
            let mut bump: Option<Array2<f64>> = None;
            for p in mine {
                bump.get_or_insert_with(|| Array2::zeros(keep.raw_dim()))[[p.row, p.col]] += p.delta;
            }
            if let Some(bump) = bump {
                scaled = self.tape.add_const(scaled, &bump);
            }
            let used = self.tape.mul_const(scaled, keep.clone());
            outs.push(self.tape.matmul(used, vh));
            nodes.push(HeadNodes { probs, scaled });
        }
        let merged = self.tape.concat_cols(&outs);
        (self.linear(merged, &w.o), nodes)
    }

    fn ffn(&mut self, x: NodeId, b: &Block) -> NodeId {
        let h = self.norm(x, &b.ln_ffn);
        let h = self.linear(h, &b.ffn_in);
        let h = self.tape.gelu(h);
        let h = self.linear(h, &b.ffn_out);
        self.tape.add(x, h)
    }
}

/// Self-attention mask: causal or bidirectional, with padded keys hidden
/// except from their own query so every row keeps at least one entry.
pub(crate) fn self_mask(ids: &[TokenId], pad: TokenId, causal: bool) -> Array2<bool> {
    let n = ids.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if causal && j > i {
            false
        } else {
            i == j || ids[j] != pad
        }
    })
}

pub(crate) fn cross_mask(tgt_len: usize, src_ids: &[TokenId], pad: TokenId) -> Array2<bool> {
    Array2::from_shape_fn((tgt_len, src_ids.len()), |(_, j)| src_ids[j] != pad)
}

pub(crate) fn run(weights: &Weights, heads: usize, spec: ForwardSpec<'_>) -> Trace {
    let mut tape = Tape::new();
    let mut attn: BTreeMap<Family, Vec<Vec<HeadNodes>>> = BTreeMap::new();
    let mut enc_hidden = Vec::new();
    let mut dec_hidden = Vec::new();

    let mut ctx = Ctx {
        tape: &mut tape,
        heads,
        alpha: spec.alpha,
        probes: spec.probes,
    };

    let mut enc_tok_leaf = None;
    let mut memory = None;
    if let Some(enc_pos) = &weights.enc_pos {
        let n = spec.enc_ids.len();
        let tok = ctx.tape.leaf(spec.enc_tok);
        enc_tok_leaf = Some(tok);
        let pos = ctx.tape.leaf(enc_pos.slice(s![..n, ..]).to_owned());
        let mut x = ctx.tape.add(tok, pos);
        let mask = self_mask(spec.enc_ids, spec.pad_id, false);
        for (l, block) in weights.encoder.iter().enumerate() {
            let h = ctx.norm(x, &block.ln_self);
            let (a, nodes) = ctx.attention(&block.self_attn, h, h, &mask, Family::EncoderSelf, l);
            attn.entry(Family::EncoderSelf).or_default().push(nodes);
            x = ctx.tape.add(x, a);
            x = ctx.ffn(x, block);
            enc_hidden.push(x);
        }
        memory = Some(ctx.norm(x, weights.enc_norm.as_ref().expect("encoder norm")));
    }

    let m = spec.dec_ids.len();
    let tok = ctx.tape.leaf(spec.dec_tok);
    let pos = ctx.tape.leaf(weights.dec_pos.slice(s![..m, ..]).to_owned());
    let mut y = ctx.tape.add(tok, pos);
    let self_m = self_mask(spec.dec_ids, spec.pad_id, true);
    let cross_m = cross_mask(m, spec.enc_ids, spec.pad_id);
    for (l, block) in weights.decoder.iter().enumerate() {
        let h = ctx.norm(y, &block.ln_self);
        let (a, nodes) = ctx.attention(&block.self_attn, h, h, &self_m, Family::DecoderSelf, l);
        attn.entry(Family::DecoderSelf).or_default().push(nodes);
        y = ctx.tape.add(y, a);
        if let (Some((ln, cross)), Some(mem)) = (&block.cross, memory) {
            let h = ctx.norm(y, ln);
            let (a, nodes) = ctx.attention(cross, h, mem, &cross_m, Family::Cross, l);
            attn.entry(Family::Cross).or_default().push(nodes);
            y = ctx.tape.add(y, a);
        }
        y = ctx.ffn(y, block);
        dec_hidden.push(y);
    }
    let out = ctx.norm(y, &weights.dec_norm);
    let emb = ctx.tape.leaf(weights.tok_emb.clone());
    let logits = ctx.tape.matmul_bt(out, emb);

    Trace {
        tape,
        enc_tok: enc_tok_leaf,
        dec_tok: tok,
        attn,
        enc_hidden,
        dec_hidden,
        logits,
    }
}
