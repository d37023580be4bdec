//! Tape of matrix operations with a reverse sweep.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Nodes are appended in evaluation order, so the reverse sweep is a plain
//! walk from the last node to the first.

use std::collections::HashMap;

use crate::error::AutodiffError;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Block layout for fused self-attention over `rows = blocks * seq_len`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub seq_len: usize,
    pub heads: usize,
    /// One flag per row; invalid rows are neither attended to nor produce output.
    pub valid: Vec<bool>,
    /// Query position `i` may only attend to key positions `j <= i`.
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    MaskRows(Var, Vec<bool>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
}

enum NodeValue {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: NodeValue,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    first_non_finite: Option<&'static str>,
}

/// Reverse-sweep result.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with the store's parameter order; parameters the
    /// loss never touched get exact zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.0] = g.clone();
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            first_non_finite: None,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let t = self.value(v);
        [t.rows(), t.cols()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(name);
        }
        self.nodes.push(Node {
            value: NodeValue::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf (used by finite-difference tests on raw inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, AutodiffError> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: NodeValue::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, "matmul"))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, op, rg, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    fn broadcast_row(
        &mut self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(name, ta, tr));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for r in 0..ta.rows() {
            for (o, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tr.data()) {
                *o = f(*o, b);
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(out, op, rg, name))
    }

    /// `a + row` with the `1 x n` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.broadcast_row(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.broadcast_row(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    /// `a + tile` where `tile` is repeated down the rows of `a` (positional tables).
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var, AutodiffError> {
        let (ta, tt) = (self.value(a), self.value(tile));
        if tt.cols() != ta.cols() || tt.rows() == 0 || ta.rows() % tt.rows() != 0 {
            return Err(shape_err("add_tiled", ta, tt));
        }
        let mut out = ta.clone();
        let n = tt.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &t) in chunk.iter_mut().zip(tt.data()) {
                *o += t;
            }
        }
        let rg = self.requires(a) || self.requires(tile);
        Ok(self.push(out, Op::AddTiled(a, tile), rg, "add_tiled"))
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same length");
        let rg = self.requires(a);
        self.push(out, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, "gelu", gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, "exp", f64::exp, Op::Exp(a))
    }

    /// Element-wise clamp; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, "clamp", |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.rows() != 1 || tg.cols() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if !tb.same_shape(tg) {
            return Err(shape_err("layer_norm", tg, tb));
        }
        let mut out = Tensor::zeros(tx.rows(), c);
        let mut normalized = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; tx.rows()];
        for r in 0..tx.rows() {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let o = out.row_slice_mut(r);
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                normalized[r * c + j] = xh;
                o[j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
            "layer_norm",
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.requires(x);
        self.push(out, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    /// Scaled dot-product attention within independent blocks of
    /// `layout.seq_len` rows. Invalid keys receive exactly zero weight;
    /// invalid query rows output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var, AutodiffError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if !tq.same_shape(tk) {
            return Err(shape_err("attention", tq, tk));
        }
        if !tq.same_shape(tv) {
            return Err(shape_err("attention", tq, tv));
        }
        let (n, width) = (tq.rows(), tq.cols());
        let t = layout.seq_len;
        if t == 0 || n % t != 0 || layout.valid.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention",
                lhs: vec![n, width],
                rhs: vec![t, layout.valid.len()],
            });
        }
        if layout.heads == 0 || width % layout.heads != 0 {
            return Err(AutodiffError::HeadDivisibility {
                width,
                heads: layout.heads,
            });
        }
        let h = layout.heads;
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = n / t;
        let mut probs = vec![0.0; blocks * h * t * t];
        let mut out = Tensor::zeros(n, width);
        let mut scores = vec![0.0; t];
        for b in 0..blocks {
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                for i in 0..t {
                    let qi_row = b * t + i;
                    if !layout.valid[qi_row] {
                        continue;
                    }
                    let qi = &tq.row_slice(qi_row)[cols.clone()];
                    let limit = if layout.causal { i + 1 } else { t };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        if !layout.valid[b * t + j] {
                            continue;
                        }
                        let kj = &tk.row_slice(b * t + j)[cols.clone()];
                        let s: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p_base = ((b * h + head) * t + i) * t;
                    let mut sum = 0.0;
                    for j in 0..limit {
                        if !layout.valid[b * t + j] {
                            continue;
                        }
                        let e = (scores[j] - max).exp();
                        probs[p_base + j] = e;
                        sum += e;
                    }
                    let o = &mut out.row_slice_mut(qi_row)[cols.clone()];
                    for j in 0..limit {
                        if !layout.valid[b * t + j] {
                            continue;
                        }
                        let p = probs[p_base + j] / sum;
                        probs[p_base + j] = p;
                        let vj = &tv.row_slice(b * t + j)[cols.clone()];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
            "attention",
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, indexed
    /// `[block][head][query][key]` and flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.row_slice_mut(r)[off..off + c].copy_from_slice(t.row_slice(r));
                off += c;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows"))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_slice_mut(r)
                .copy_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg, "slice_cols"))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let rows = self.value(a).rows();
        if start + len > rows {
            return Err(AutodiffError::IndexOutOfRange {
                index: start + len,
                len: rows,
            });
        }
        let idx: Vec<Option<usize>> = (start..start + len).map(Some).collect();
        self.gather_rows(a, &idx)
    }

    /// Builds a new matrix from selected rows of `a`; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Tensor::zeros(index.len(), c);
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= ta.rows() {
                    return Err(AutodiffError::IndexOutOfRange {
                        index: s,
                        len: ta.rows(),
                    });
                }
                out.row_slice_mut(r).copy_from_slice(ta.row_slice(s));
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), rg, "gather_rows"))
    }

    /// Zeroes every row whose flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if keep.len() != ta.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mask_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut out = ta.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_slice_mut(r).fill(0.0);
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, Op::MaskRows(a, keep.to_vec()), rg, "mask_rows"))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg, "mean")
    }

    /// Per-row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data).expect("one per row");
        let rg = self.requires(a);
        self.push(out, Op::SumCols(a), rg, "sum_cols")
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.rows() != 1 || lt.cols() != 1 {
            return Err(AutodiffError::NotScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, v: Var) -> Tensor {
        let t = self.value(v);
        Tensor::zeros(t.rows(), t.cols())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_val = match &self.nodes[idx].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(_) => return,
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nt_acc(g.data(), tb.data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm_tn_acc(ta.data(), g.data(), db.data_mut(), m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                da.data_mut().iter_mut().zip(tb.data()).for_each(|(d, &y)| *d *= y);
                let mut db = g.clone();
                db.data_mut().iter_mut().zip(ta.data()).for_each(|(d, &x)| *d *= x);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for i in 0..g.len() {
                    // Ties route the gradient to the first argument.
                    if ta.data()[i] <= tb.data()[i] {
                        db.data_mut()[i] = 0.0;
                    } else {
                        da.data_mut()[i] = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let mut dr = self.like(*row);
                let c = g.cols();
                for r in 0..g.rows() {
                    for (d, &x) in dr.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let c = g.cols();
                let mut da = g.clone();
                let mut dr = self.like(*row);
                for r in 0..g.rows() {
                    for j in 0..c {
                        let gi = g.data()[r * c + j];
                        da.data_mut()[r * c + j] = gi * tr.data()[j];
                        dr.data_mut()[j] += gi * ta.data()[r * c + j];
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *row, dr);
            }
            Op::AddTiled(a, tile) => {
                self.accumulate(grads, *a, g.clone());
                let mut dt = self.like(*tile);
                let n = dt.len();
                for chunk in g.data().chunks(n) {
                    for (d, &x) in dt.data_mut().iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *tile, dt);
            }
            Op::Scale(a, c) => {
                let mut da = g.clone();
                da.data_mut().iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *a, da);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut da = g.clone();
                da.data_mut()
                    .iter_mut()
                    .zip(out_val.data())
                    .for_each(|(d, &y)| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let mut da = g.clone();
                da.data_mut()
                    .iter_mut()
                    .zip(out_val.data())
                    .for_each(|(d, &y)| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let mut da = g.clone();
                da.data_mut()
                    .iter_mut()
                    .zip(self.value(*a).data())
                    .for_each(|(d, &x)| *d *= gelu_grad(x));
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let mut da = g.clone();
                da.data_mut()
                    .iter_mut()
                    .zip(out_val.data())
                    .for_each(|(d, &y)| *d *= y);
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let mut da = g.clone();
                da.data_mut()
                    .iter_mut()
                    .zip(self.value(*a).data())
                    .for_each(|(d, &x)| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let c = g.cols();
                let mut dx = self.like(*x);
                let mut dgain = self.like(*gain);
                let mut dbias = self.like(*bias);
                let mut dxh = vec![0.0; c];
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let xh = &normalized[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgain.data_mut()[j] += gr[j] * xh[j];
                        dbias.data_mut()[j] += gr[j];
                        dxh[j] = gr[j] * tg.data()[j];
                        sum_d += dxh[j];
                        sum_dx += dxh[j] * xh[j];
                    }
                    let scale = inv_std[r] / c as f64;
                    let out = dx.row_slice_mut(r);
                    for j in 0..c {
                        out[j] = scale * (c as f64 * dxh[j] - sum_d - xh[j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::SoftmaxRows(a) => {
                let mut da = g.clone();
                for r in 0..g.rows() {
                    let y = out_val.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in da.row_slice_mut(r).iter_mut().enumerate() {
                        *d = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, width) = (tq.rows(), tq.cols());
                let t = layout.seq_len;
                let h = layout.heads;
                let dh = width / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let blocks = n / t;
                let mut dq = Tensor::zeros(n, width);
                let mut dk = Tensor::zeros(n, width);
                let mut dv = Tensor::zeros(n, width);
                let mut dp = vec![0.0; t];
                for b in 0..blocks {
                    for head in 0..h {
                        let cols = head * dh..(head + 1) * dh;
                        for i in 0..t {
                            let qi_row = b * t + i;
                            if !layout.valid[qi_row] {
                                continue;
                            }
                            let go = &g.row_slice(qi_row)[cols.clone()];
                            let limit = if layout.causal { i + 1 } else { t };
                            let p_base = ((b * h + head) * t + i) * t;
                            let mut weighted = 0.0;
                            for j in 0..limit {
                                if !layout.valid[b * t + j] {
                                    continue;
                                }
                                let vj = &tv.row_slice(b * t + j)[cols.clone()];
                                let d: f64 = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dp[j] = d;
                                weighted += probs[p_base + j] * d;
                                let p = probs[p_base + j];
                                let dvj = &mut dv.row_slice_mut(b * t + j)[cols.clone()];
                                for (dvv, &gv) in dvj.iter_mut().zip(go) {
                                    *dvv += p * gv;
                                }
                            }
                            let qi: Vec<f64> = tq.row_slice(qi_row)[cols.clone()].to_vec();
                            for j in 0..limit {
                                if !layout.valid[b * t + j] {
                                    continue;
                                }
                                let ds = probs[p_base + j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row_slice(b * t + j)[cols.clone()];
                                let dqi = &mut dq.row_slice_mut(qi_row)[cols.clone()];
                                for (d, &kv) in dqi.iter_mut().zip(kj) {
                                    *d += ds * kv;
                                }
                                let dkj = &mut dk.row_slice_mut(b * t + j)[cols.clone()];
                                for (d, &qv) in dkj.iter_mut().zip(&qi) {
                                    *d += ds * qv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires(p) {
                        let mut dp = self.like(p);
                        for r in 0..g.rows() {
                            dp.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires(p) {
                        let mut dp = self.like(p);
                        dp.data_mut().copy_from_slice(&g.data()[off..off + len]);
                        self.accumulate(grads, p, dp);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let mut da = self.like(*a);
                let len = g.cols();
                for r in 0..g.rows() {
                    da.row_slice_mut(r)[*start..*start + len].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, index) => {
                let mut da = self.like(*a);
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        for (d, &x) in da.row_slice_mut(s).iter_mut().zip(g.row_slice(r)) {
                            *d += x;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::MaskRows(a, keep) => {
                let mut da = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        da.row_slice_mut(r).fill(0.0);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let da = Tensor::filled(ta.rows(), ta.cols(), g.item());
                self.accumulate(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let da = Tensor::filled(ta.rows(), ta.cols(), g.item() / ta.len() as f64);
                self.accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    da.row_slice_mut(r).fill(g.data()[r]);
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}
