// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small reverse-mode tape over 2-D `f64` matrices.
//!
//! Only the operations the transformer in [`crate::model`] needs are
//! provided. Every node is a matrix; scalars are `1 × 1` matrices.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub(crate) type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + b` with `b` a `1 × cols` row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a constant matrix (no gradient to the constant).
    MulConst(NodeId, Array2<f64>),
    /// Addition of a constant matrix; gradient passes straight through.
    AddConst(NodeId),
    /// Row-wise softmax with a constant boolean key mask (`false` = excluded).
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    /// Summed token cross-entropy of `logits` rows against `targets`.
    CrossEntropy(NodeId, Vec<usize>, Array2<f64>),
    Pick(NodeId, usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

pub(crate) struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `id`; zeros when `id`
    /// does not influence the output.
    pub fn of(&self, tape: &Tape, id: NodeId) -> Array2<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(id).raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    /// Softmax over each row restricted to `mask == true` entries; masked
    /// entries are exactly zero. Every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: NodeId, mask: &Array2<bool>) -> NodeId {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        for ((xr, mr), mut or) in x.outer_iter().zip(mask.outer_iter()).zip(out.outer_iter_mut()) {
            let max = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ((o, &v), &m) in or.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            or.mapv_inplace(|o| o / total);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut normed = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (xr, mut nr) in xv.outer_iter().zip(normed.outer_iter_mut()) {
            let mean = xr.sum() / cols;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            nr.assign(&xr.mapv(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let out = &normed * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x.powi(3))).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        let mut probs = Array2::zeros(lv.raw_dim());
        let mut loss = 0.0;
        for ((row, mut pr), &t) in lv.outer_iter().zip(probs.outer_iter_mut()).zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            pr.assign(&row.mapv(|v| (v - log_z).exp()));
        }
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(v, Op::Pick(a, row, col))
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(Array2::ones(self.value(output).raw_dim()));

        fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulBt(a, b) => {
                    accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::AddConst(a) => accumulate(&mut grads, *a, g.clone()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    Zip::from(dx.rows_mut())
                        .and(y.rows())
                        .and(g.rows())
                        .for_each(|mut d, yr, gr| {
                            let dot = yr.dot(&gr);
                            Zip::from(&mut d)
                                .and(&yr)
                                .and(&gr)
                                .for_each(|d, &y, &g| *d = y * (g - dot));
                        });
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *gamma, (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dn = &g * gv;
                    let cols = dn.ncols() as f64;
                    let mut dx = Array2::zeros(dn.raw_dim());
                    for (r, inv) in inv_std.iter().enumerate() {
                        let dnr = dn.row(r);
                        let nr = normed.row(r);
                        let mean_d = dnr.sum() / cols;
                        let mean_dn = dnr.dot(&nr) / cols;
                        let mut out = dx.row_mut(r);
                        Zip::from(&mut out)
                            .and(&dnr)
                            .and(&nr)
                            .for_each(|o, &d, &n| *o = inv * (d - mean_d - n * mean_dn));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(a) => {
                    let dx = Zip::from(self.value(*a)).and(&g).map_collect(|&x, &g| {
                        let t = (GELU_C * (x + GELU_K * x.powi(3))).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    });
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let scale = g[[0, 0]];
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, d * scale);
                }
                Op::Pick(a, r, c) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d[[*r, *c]] = g[[0, 0]];
                    accumulate(&mut grads, *a, d);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}
