// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter storage, seeded initialisation and safetensors I/O.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::{Arch, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    /// `1 × out`
    pub b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln_self: Norm,
    pub self_attn: AttentionWeights,
    /// Present on decoder blocks of encoder-decoder models only.
    pub cross: Option<(Norm, AttentionWeights)>,
    pub ln_ffn: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Weights {
    pub tok_emb: Array2<f64>,
    pub enc_pos: Option<Array2<f64>>,
    pub dec_pos: Array2<f64>,
    pub encoder: Vec<Block>,
    pub enc_norm: Option<Norm>,
    pub decoder: Vec<Block>,
    pub dec_norm: Norm,
}

struct Init {
    rng: ChaCha8Rng,
    gain: f64,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }

    fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.normal(d_in, d_out, self.gain / (d_in as f64).sqrt()),
            b: self.normal(1, d_out, 0.1),
        }
    }

    fn norm(&mut self, d: usize) -> Norm {
        Norm {
            gamma: Array2::ones((1, d)) + self.normal(1, d, 0.05),
            beta: self.normal(1, d, 0.05),
        }
    }

    fn attention(&mut self, d: usize) -> AttentionWeights {
        AttentionWeights {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }

    fn block(&mut self, d: usize, ffn: usize, cross: bool) -> Block {
        let ln_self = self.norm(d);
        let self_attn = self.attention(d);
        let cross = cross.then(|| (self.norm(d), self.attention(d)));
        Block {
            ln_self,
            self_attn,
            cross,
            ln_ffn: self.norm(d),
            ffn_in: self.linear(d, ffn),
            ffn_out: self.linear(ffn, d),
        }
    }
}

impl Weights {
    pub fn init(cfg: &ModelConfig, arch: Arch, vocab: usize) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            gain: cfg.init_gain,
        };
        let d = cfg.hidden_dim;
        let ffn = cfg.ffn_dim();
        let tok_emb = init.normal(vocab, d, 1.0);
        let dec_pos = init.normal(cfg.max_positions, d, 0.5);
        let seq2seq = arch == Arch::EncoderDecoder;
        let enc_pos = seq2seq.then(|| init.normal(cfg.max_positions, d, 0.5));
        let encoder = (0..cfg.num_layers_enc).map(|_| init.block(d, ffn, false)).collect();
        let enc_norm = seq2seq.then(|| init.norm(d));
        let decoder = (0..cfg.num_layers_dec).map(|_| init.block(d, ffn, seq2seq)).collect();
        let dec_norm = init.norm(d);
        Weights {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        fn linear(p: &str, l: &mut Linear, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
            f(format!("{p}.weight"), &mut l.w);
            f(format!("{p}.bias"), &mut l.b);
        }
        fn norm(p: &str, n: &mut Norm, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
            f(format!("{p}.gamma"), &mut n.gamma);
            f(format!("{p}.beta"), &mut n.beta);
        }
        fn attn(p: &str, a: &mut AttentionWeights, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
            linear(&format!("{p}.q"), &mut a.q, f);
            linear(&format!("{p}.k"), &mut a.k, f);
            linear(&format!("{p}.v"), &mut a.v, f);
            linear(&format!("{p}.o"), &mut a.o, f);
        }
        fn block(p: &str, b: &mut Block, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
            norm(&format!("{p}.ln_self"), &mut b.ln_self, f);
            attn(&format!("{p}.self_attn"), &mut b.self_attn, f);
            if let Some((n, a)) = &mut b.cross {
                norm(&format!("{p}.ln_cross"), n, f);
                attn(&format!("{p}.cross_attn"), a, f);
            }
            norm(&format!("{p}.ln_ffn"), &mut b.ln_ffn, f);
            linear(&format!("{p}.ffn_in"), &mut b.ffn_in, f);
            linear(&format!("{p}.ffn_out"), &mut b.ffn_out, f);
        }

        f("tok_emb".into(), &mut self.tok_emb);
        if let Some(p) = &mut self.enc_pos {
            f("encoder.pos".into(), p);
        }
        f("decoder.pos".into(), &mut self.dec_pos);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            block(&format!("encoder.{i}"), b, f);
        }
        if let Some(n) = &mut self.enc_norm {
            norm("encoder.final_norm", n, f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            block(&format!("decoder.{i}"), b, f);
        }
        norm("decoder.final_norm", &mut self.dec_norm, f);
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        self.visit_mut(&mut |name, arr| {
            let bytes = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
            tensors.insert(name, (arr.shape().to_vec(), bytes));
        });
        let views = tensors
            .iter()
            .map(|(name, (shape, bytes))| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Config(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = safetensors::serialize(views, &None).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, data).map_err(|e| Error::path(path, e))
    }

    /// Overwrites the seeded parameters with those stored in `path`. Every
    /// parameter must be present with a matching shape.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Config(e.to_string()))?;
        let mut failure = None;
        self.visit_mut(&mut |name, arr| {
            if failure.is_some() {
                return;
            }
            let view = match st.tensor(&name) {
                Ok(v) => v,
                Err(_) => {
                    failure = Some(format!("missing tensor `{name}`"));
                    return;
                }
            };
            if view.shape() != arr.shape() {
                failure = Some(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    view.shape(),
                    arr.shape()
                ));
                return;
            }
            let values: Vec<f64> = match view.dtype() {
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => {
                    failure = Some(format!("tensor `{name}` has unsupported dtype {other:?}"));
                    return;
                }
            };
            arr.as_slice_mut().expect("standard layout").copy_from_slice(&values);
        });
        match failure {
            Some(reason) => Err(Error::Config(reason)),
            None => Ok(()),
        }
    }
}
