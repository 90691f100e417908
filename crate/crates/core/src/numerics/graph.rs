//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; nodes are stored in
//! creation order, which is a topological order, so [`Graph::backward`] is a
//! single reverse sweep. The closed set of primitives covers exactly what the
//! encoder, the masked-LM loss and the syntactic penalty need.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, MatMut, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for batched multi-head attention.
///
/// Activations are `[batch * seq, heads * head_dim]` with row `b * seq + t`;
/// attention weights are `[batch, heads, seq, seq]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    GatherRows { table: Var, rows: Vec<usize> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    AttnWeights {
        q: Var,
        k: Var,
        layout: AttentionLayout,
        lengths: Vec<usize>,
    },
    AttnMix {
        p: Var,
        v: Var,
        layout: AttentionLayout,
    },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Stack(Vec<Var>),
    GatherElems { x: Var, index: Vec<usize> },
    RowMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf marked `requires_grad`.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

fn finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; gradients are tracked if the tensor has `requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        finite("add", &out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// `x[n, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = tx.cols();
        if tb.len() != d {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, bi) in row.iter_mut().zip(tb.data()) {
                *o += bi;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("add_row", &out)?;
        let g = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddRow(x, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        finite("mul", &out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// `x[n, d] * g[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("mul_row", tx.shape(), tg.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, gi) in row.iter_mut().zip(tg.data()) {
                *o *= gi;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("mul_row", &out)?;
        let g = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::MulRow(x, gain), g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("scale", &out)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::Scale(x, c), g))
    }

    /// `a[m, k] @ b[k, n]`, or `a[m, k] @ b[n, k]^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta);
        let (br, bc) = as_matrix(tb);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut data = vec![0.0; m * n];
        let bref = MatRef::dense(tb.data(), br, bc);
        let bref = if trans_b { bref.t() } else { bref };
        gemm(
            1.0,
            MatRef::dense(ta.data(), m, k),
            bref,
            0.0,
            MatMut::dense(&mut data, m, n),
        );
        let out = Tensor::new(vec![m, n], data)?;
        finite("matmul", &out)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, g))
    }

    /// Selects rows of a `[v, d]` table; used for embedding lookup.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = as_matrix(tt);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(Error::OutOfRange(format!("row {r} of table with {v} rows")));
            }
            data.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let g = self.needs(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("layer_norm", &out)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, g))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("gelu", &out)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::Gelu(x), g))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        finite("softmax", &out)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), g))
    }

    /// Scaled dot-product attention weights per head.
    ///
    /// Keys at positions `>= lengths[b]` receive zero weight and query rows
    /// at those positions are all zero.
    pub fn attention_weights(
        &mut self,
        q: Var,
        k: Var,
        layout: AttentionLayout,
        lengths: &[usize],
    ) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let AttentionLayout { batch, seq, heads } = layout;
        let width = tq.cols();
        if tq.shape() != tk.shape()
            || tq.rows() != batch * seq
            || heads == 0
            || width % heads != 0
            || lengths.len() != batch
            || lengths.iter().any(|&l| l > seq)
        {
            return Err(shape_err("attention_weights", tq.shape(), tk.shape()));
        }
        let dk = width / heads;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let mut data = vec![0.0; batch * heads * seq * seq];
        for (b, &len) in lengths.iter().enumerate().take(batch) {
            if len == 0 {
                continue;
            }
            for h in 0..heads {
                let block = (b * heads + h) * seq * seq;
                let off = b * seq * width + h * dk;
                gemm(
                    scale,
                    MatRef::strided(tq.data(), off, len, dk, width),
                    MatRef::strided(tk.data(), off, len, dk, width).t(),
                    0.0,
                    MatMut {
                        data: &mut data,
                        offset: block,
                        rows: len,
                        cols: len,
                        rs: seq,
                        cs: 1,
                    },
                );
                for i in 0..len {
                    let row = &mut data[block + i * seq..block + i * seq + len];
                    softmax_in_place(row);
                }
            }
        }
        let out = Tensor::new(vec![batch, heads, seq, seq], data)?;
        finite("attention_weights", &out)?;
        let g = self.needs(q) || self.needs(k);
        Ok(self.push(
            out,
            Op::AttnWeights {
                q,
                k,
                layout,
                lengths: lengths.to_vec(),
            },
            g,
        ))
    }

    /// Mixes values with attention weights: per head, `P @ V`.
    pub fn attention_mix(&mut self, p: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tp, tv) = (self.value(p), self.value(v));
        let AttentionLayout { batch, seq, heads } = layout;
        let width = tv.cols();
        if tp.shape() != [batch, heads, seq, seq]
            || tv.rows() != batch * seq
            || width % heads != 0
        {
            return Err(shape_err("attention_mix", tp.shape(), tv.shape()));
        }
        let dk = width / heads;
        let mut data = vec![0.0; batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let block = (b * heads + h) * seq * seq;
                gemm(
                    1.0,
                    MatRef {
                        data: tp.data(),
                        offset: block,
                        rows: seq,
                        cols: seq,
                        rs: seq,
                        cs: 1,
                    },
                    MatRef {
                        data: tv.data(),
                        offset: b * seq * width + h * dk,
                        rows: seq,
                        cols: dk,
                        rs: width,
                        cs: 1,
                    },
                    0.0,
                    MatMut {
                        data: &mut data,
                        offset: b * seq * width + h * dk,
                        rows: seq,
                        cols: dk,
                        rs: width,
                        cs: 1,
                    },
                );
            }
        }
        let out = Tensor::new(vec![batch * seq, width], data)?;
        finite("attention_mix", &out)?;
        let g = self.needs(p) || self.needs(v);
        Ok(self.push(out, Op::AttnMix { p, v, layout }, g))
    }

    /// Mean cross-entropy of `logits[n, v]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = as_matrix(tl);
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if n == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::OutOfRange(format!("target {t} with {v} classes")));
            }
            total += log_softmax_nll(row, t);
            softmax_in_place(row);
        }
        let out = Tensor::scalar(total / n as f64);
        finite("cross_entropy", &out)?;
        let g = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("stack"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(*first).len());
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::new(out_shape, data)?;
        let g = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::Stack(xs.to_vec()), g))
    }

    /// Picks flat-indexed elements of `x` into a tensor of `shape`.
    pub fn gather_elems(&mut self, x: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            data.push(
                *tx.data()
                    .get(i)
                    .ok_or_else(|| Error::OutOfRange(format!("element {i} of {}", tx.len())))?,
            );
        }
        let out = Tensor::new(shape, data)?;
        let g = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                index: index.to_vec(),
            },
            g,
        ))
    }

    /// Maximum of each row; the gradient flows to the first maximizer.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = as_matrix(tx);
        if c == 0 {
            return Err(Error::Empty("row_max"));
        }
        let mut data = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for row in tx.data().chunks(c) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(vec![r], data)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::RowMax { x, argmax }, g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        finite("sum", &out)?;
        let g = self.needs(x);
        Ok(self.push(out, Op::Sum(x), g))
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes } = self;
        let lt = &nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &x in [a, b].iter() {
                        if needs(*x) {
                            accumulate(&mut grads, *x, &gout);
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    if needs(*x) {
                        accumulate(&mut grads, *x, &gout);
                    }
                    if needs(*b) {
                        let d = val(*b).len();
                        let mut gb = vec![0.0; d];
                        for row in gout.chunks(d) {
                            for (o, g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let g: Vec<f64> = gout.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, &g);
                    }
                    if needs(*b) {
                        let g: Vec<f64> = gout.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::MulRow(x, gain) => {
                    let d = val(*gain).len();
                    if needs(*x) {
                        let mut g = gout.clone();
                        for row in g.chunks_mut(d) {
                            for (o, gi) in row.iter_mut().zip(val(*gain).data()) {
                                *o *= gi;
                            }
                        }
                        accumulate(&mut grads, *x, &g);
                    }
                    if needs(*gain) {
                        let mut gg = vec![0.0; d];
                        for (grow, xrow) in gout.chunks(d).zip(val(*x).data().chunks(d)) {
                            for ((o, g), xv) in gg.iter_mut().zip(grow).zip(xrow) {
                                *o += g * xv;
                            }
                        }
                        accumulate(&mut grads, *gain, &gg);
                    }
                }
                Op::Scale(x, c) => {
                    if needs(*x) {
                        let g: Vec<f64> = gout.iter().map(|g| g * c).collect();
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = as_matrix(ta);
                    let (br, bc) = as_matrix(tb);
                    let n = if *trans_b { br } else { bc };
                    let go = MatRef::dense(&gout, m, n);
                    if needs(*a) {
                        // dA = dC @ B^T  (or dC @ B when B was transposed)
                        let bref = MatRef::dense(tb.data(), br, bc);
                        let bt = if *trans_b { bref } else { bref.t() };
                        let mut g = vec![0.0; m * k];
                        gemm(1.0, go, bt, 0.0, MatMut::dense(&mut g, m, k));
                        accumulate(&mut grads, *a, &g);
                    }
                    if needs(*b) {
                        let at = MatRef::dense(ta.data(), m, k).t();
                        let mut g = vec![0.0; br * bc];
                        if *trans_b {
                            // dB[n, k] = dC^T @ A
                            gemm(1.0, go.t(), MatRef::dense(ta.data(), m, k), 0.0, MatMut::dense(&mut g, br, bc));
                        } else {
                            gemm(1.0, at, go, 0.0, MatMut::dense(&mut g, br, bc));
                        }
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::GatherRows { table, rows } => {
                    if needs(*table) {
                        let tt = val(*table);
                        let d = tt.cols();
                        let mut g = vec![0.0; tt.len()];
                        for (r, grow) in rows.iter().zip(gout.chunks(d)) {
                            for (o, gv) in g[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                        accumulate(&mut grads, *table, &g);
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    if needs(*x) {
                        let y = node.value.data();
                        let d = node.value.cols();
                        let mut g = vec![0.0; y.len()];
                        for (r, is) in inv_std.iter().enumerate() {
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            let mean_g = gr.iter().sum::<f64>() / d as f64;
                            let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                g[r * d + j] = is * (gr[j] - mean_g - yr[j] * mean_gy);
                            }
                        }
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::Gelu(x) => {
                    if needs(*x) {
                        let inv_sqrt_2pi = 0.5 * core::f64::consts::FRAC_2_SQRT_PI * core::f64::consts::FRAC_1_SQRT_2;
                        let g: Vec<f64> = val(*x)
                            .data()
                            .iter()
                            .zip(&gout)
                            .map(|(&v, go)| {
                                let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                                let pdf = inv_sqrt_2pi * libm::exp(-0.5 * v * v);
                                go * (cdf + v * pdf)
                            })
                            .collect();
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::Softmax(x) => {
                    if needs(*x) {
                        let y = node.value.data();
                        let d = node.value.cols();
                        let mut g = vec![0.0; y.len()];
                        softmax_backward(y, &gout, &mut g, d);
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::AttnWeights { q, k, layout, lengths } => {
                    let (tq, tk) = (val(*q), val(*k));
                    let AttentionLayout { batch, seq, heads } = *layout;
                    let width = tq.cols();
                    let dk = width / heads;
                    let scale = 1.0 / libm::sqrt(dk as f64);
                    let p = node.value.data();
                    let mut ds = vec![0.0; p.len()];
                    for (b, &len) in lengths.iter().enumerate().take(batch) {
                        for h in 0..heads {
                            let block = (b * heads + h) * seq * seq;
                            for i in 0..len {
                                let o = block + i * seq;
                                let pr = &p[o..o + len];
                                let gr = &gout[o..o + len];
                                let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for j in 0..len {
                                    ds[o + j] = pr[j] * (gr[j] - dot);
                                }
                            }
                        }
                    }
                    let mut gq = needs(*q).then(|| vec![0.0; tq.len()]);
                    let mut gk = needs(*k).then(|| vec![0.0; tk.len()]);
                    for (b, &len) in lengths.iter().enumerate().take(batch) {
                        if len == 0 {
                            continue;
                        }
                        for h in 0..heads {
                            let block = (b * heads + h) * seq * seq;
                            let dsv = MatRef {
                                data: &ds,
                                offset: block,
                                rows: len,
                                cols: len,
                                rs: seq,
                                cs: 1,
                            };
                            let off = b * seq * width + h * dk;
                            if let Some(gq) = gq.as_mut() {
                                gemm(
                                    scale,
                                    dsv,
                                    MatRef::strided(tk.data(), off, len, dk, width),
                                    1.0,
                                    MatMut::strided(gq, off, len, dk, width),
                                );
                            }
                            if let Some(gk) = gk.as_mut() {
                                gemm(
                                    scale,
                                    dsv.t(),
                                    MatRef::strided(tq.data(), off, len, dk, width),
                                    1.0,
                                    MatMut::strided(gk, off, len, dk, width),
                                );
                            }
                        }
                    }
                    if let Some(g) = gq {
                        accumulate(&mut grads, *q, &g);
                    }
                    if let Some(g) = gk {
                        accumulate(&mut grads, *k, &g);
                    }
                }
                Op::AttnMix { p, v, layout } => {
                    let (tp, tv) = (val(*p), val(*v));
                    let AttentionLayout { batch, seq, heads } = *layout;
                    let width = tv.cols();
                    let dk = width / heads;
                    let mut gp = needs(*p).then(|| vec![0.0; tp.len()]);
                    let mut gv = needs(*v).then(|| vec![0.0; tv.len()]);
                    for b in 0..batch {
                        for h in 0..heads {
                            let block = (b * heads + h) * seq * seq;
                            let off = b * seq * width + h * dk;
                            let pv = MatRef {
                                data: tp.data(),
                                offset: block,
                                rows: seq,
                                cols: seq,
                                rs: seq,
                                cs: 1,
                            };
                            if let Some(gp) = gp.as_mut() {
                                gemm(
                                    1.0,
                                    MatRef::strided(&gout, off, seq, dk, width),
                                    MatRef::strided(tv.data(), off, seq, dk, width).t(),
                                    1.0,
                                    MatMut {
                                        data: gp,
                                        offset: block,
                                        rows: seq,
                                        cols: seq,
                                        rs: seq,
                                        cs: 1,
                                    },
                                );
                            }
                            if let Some(gv) = gv.as_mut() {
                                gemm(
                                    1.0,
                                    pv.t(),
                                    MatRef::strided(&gout, off, seq, dk, width),
                                    1.0,
                                    MatMut {
                                        data: gv,
                                        offset: off,
                                        rows: seq,
                                        cols: dk,
                                        rs: width,
                                        cs: 1,
                                    },
                                );
                            }
                        }
                    }
                    if let Some(g) = gp {
                        accumulate(&mut grads, *p, &g);
                    }
                    if let Some(g) = gv {
                        accumulate(&mut grads, *v, &g);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    if needs(*logits) {
                        let n = targets.len();
                        let v = probs.len() / n;
                        let c = gout[0] / n as f64;
                        let mut g: Vec<f64> = probs.iter().map(|p| p * c).collect();
                        for (r, &t) in targets.iter().enumerate() {
                            g[r * v + t] -= c;
                        }
                        accumulate(&mut grads, *logits, &g);
                    }
                }
                Op::Stack(xs) => {
                    let each = gout.len() / xs.len();
                    for (i, &x) in xs.iter().enumerate() {
                        if needs(x) {
                            accumulate(&mut grads, x, &gout[i * each..(i + 1) * each]);
                        }
                    }
                }
                Op::GatherElems { x, index } => {
                    if needs(*x) {
                        let mut g = vec![0.0; val(*x).len()];
                        for (&i, gv) in index.iter().zip(&gout) {
                            g[i] += gv;
                        }
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::RowMax { x, argmax } => {
                    if needs(*x) {
                        let c = val(*x).cols();
                        let mut g = vec![0.0; val(*x).len()];
                        for (r, (&j, gv)) in argmax.iter().zip(&gout).enumerate() {
                            g[r * c + j] += gv;
                        }
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::Sum(x) => {
                    if needs(*x) {
                        let g = vec![gout[0]; val(*x).len()];
                        accumulate(&mut grads, *x, &g);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            let t = match (&node.op, node.needs_grad) {
                (Op::Leaf, true) => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    if data.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("backward"));
                    }
                    Some(Tensor::new(node.value.shape().to_vec(), data)?)
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `-log softmax(row)[target]`
fn log_softmax_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    lse - row[target]
}

fn softmax_backward(y: &[f64], gout: &[f64], g: &mut [f64], d: usize) {
    for ((yr, gr), out) in y.chunks(d).zip(gout.chunks(d)).zip(g.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
}
