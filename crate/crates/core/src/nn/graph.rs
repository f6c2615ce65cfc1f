//! Recording tape with reverse-mode gradients.
//!
//! Every op appends a node holding its value and whatever the backward pass
//! needs. Parameters are referenced from the borrowed [`ParameterSet`] rather
//! than copied. `backward` consumes the recording once and returns the
//! gradients of every parameter leaf that influenced the loss.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::gemm;
use super::{ParamId, ParameterSet, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Exp(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { qkv: usize, heads: usize, seq_lens: Vec<usize>, probs: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    L2NormRows { x: usize, norms: Vec<f64> },
    LogSoftmaxPick { logits: usize, targets: Vec<usize>, allowed: Option<Vec<Vec<usize>>>, probs: Vec<f64> },
    SegmentSum { x: usize, lens: Vec<usize> },
    SumAll(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(&i, t)| (ParamId(i), t))
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParameterSet>,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), backward_done: false }
    }

    pub fn with_params(params: &'p ParameterSet) -> Self {
        Self { params: Some(params), nodes: Vec::new(), backward_done: false }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without parameter set").value(*id),
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        self.value(Var(i))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf referencing a parameter of the bound set.
    pub fn param(&mut self, id: ParamId) -> Var {
        let ps = self.params.expect("graph has no parameter set bound");
        assert!(id.0 < ps.len(), "parameter id out of range");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("matmul_nt", format!("{:?} * {:?}^T", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, (ta.data(), k, 1), (tb.data(), 1, k), out.data_mut(), 0.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMulNT(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a.0);
        self.push(out, Op::Transpose(a.0), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Minimum(a.0, b.0), rg))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tr.shape())));
        }
        let mut out = tx.clone();
        let b = tr.data();
        for r in 0..out.rows() {
            for (o, bb) in out.row_slice_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(x.0) || self.rg(row.0);
        Ok(self.push(out, Op::AddRow(x.0, row.0), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|v| v * s).collect()).unwrap();
        let rg = self.rg(x.0);
        self.push(out, Op::Scale(x.0, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::tanh(GELU_C * (v + GELU_A * v * v * v))))
            .collect();
        let out = Tensor::new(t.rows(), t.cols(), data).unwrap();
        let rg = self.rg(x.0);
        self.push(out, Op::Gelu(x.0), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| libm::exp(v)).collect()).unwrap();
        let rg = self.rg(x.0);
        self.push(out, Op::Exp(x.0), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| v.clamp(lo, hi)).collect()).unwrap();
        let rg = self.rg(x.0);
        self.push(out, Op::Clamp { x: x.0, lo, hi }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let mut out = Tensor::zeros(tx.rows(), n);
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; tx.rows()];
        for r in 0..tx.rows() {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[r] = is;
            let o = out.row_slice_mut(r);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                o[c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `N x 3d` holding queries, keys and values side by side; rows are
    /// the concatenation of sequences with lengths `seq_lens`. Position `i` of a
    /// sequence attends to positions `0..=i` of the same sequence only.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, seq_lens: &[usize]) -> Result<Var> {
        let t = self.value(qkv);
        let total: usize = seq_lens.iter().sum();
        if heads == 0 || t.cols() % (3 * heads) != 0 || total != t.rows() {
            return Err(Error::shape(
                "causal_attention",
                format!("qkv {:?}, heads {heads}, sequence rows {total}", t.shape()),
            ));
        }
        let d = t.cols() / 3;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let width = 3 * d;
        let src = t.data();
        let mut out = Tensor::zeros(t.rows(), d);
        let mut probs = Vec::with_capacity(seq_lens.iter().map(|l| l * l * heads).sum());
        let mut offset = 0;
        let mut scores = Vec::new();
        for &len in seq_lens {
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let q = &src[(offset + i) * width + h * dh..][..dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &src[(offset + j) * width + d + h * dh..][..dh];
                        let s = dot(q, k) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = libm::exp(*s - max);
                        z += *s;
                    }
                    let o = &mut out.data_mut()[(offset + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[base + i * len + j] = p;
                        let v = &src[(offset + j) * width + 2 * d + h * dh..][..dh];
                        for (oo, vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                }
            }
            offset += len;
        }
        let rg = self.rg(qkv.0);
        Ok(self.push(out, Op::Attention { qkv: qkv.0, heads, seq_lens: seq_lens.to_vec(), probs }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.gather(table, ids, "embedding")?;
        let rg = self.rg(table.0);
        Ok(self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Selects rows of `x` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.gather(x, idx, "gather_rows")?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::GatherRows { x: x.0, idx: idx.to_vec() }, rg))
    }

    fn gather(&self, x: Var, idx: &[usize], name: &str) -> Result<Tensor> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::shape(name, format!("row {i} of {}", t.rows())));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        Tensor::new(idx.len(), t.cols(), data)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = libm::sqrt(dot(t.row_slice(r), t.row_slice(r))).max(NORM_FLOOR);
            norms.push(n);
            out.row_slice_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x.0);
        self.push(out, Op::L2NormRows { x: x.0, norms }, rg)
    }

    /// Log-probability of `targets[r]` under a softmax of row `r` of `logits`,
    /// normalized over `allowed[r]` when given (over the full row otherwise).
    /// Returns an `n x 1` column.
    pub fn log_softmax_pick(
        &mut self,
        logits: Var,
        targets: &[usize],
        allowed: Option<Vec<Vec<usize>>>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n || allowed.as_ref().is_some_and(|a| a.len() != n) {
            return Err(Error::shape("log_softmax_pick", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = vec![0.0; n * v];
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let row = t.row_slice(r);
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::shape("log_softmax_pick", format!("target {tgt} of {v} classes")));
            }
            let p = &mut probs[r * v..(r + 1) * v];
            let lse = match &allowed {
                None => {
                    let lse = log_sum_exp(row.iter().copied());
                    for (pp, x) in p.iter_mut().zip(row) {
                        *pp = libm::exp(x - lse);
                    }
                    lse
                }
                Some(a) => {
                    let set = &a[r];
                    if !set.contains(&tgt) {
                        return Err(Error::Invalid(format!("target {tgt} not among allowed classes")));
                    }
                    if let Some(&bad) = set.iter().find(|&&c| c >= v) {
                        return Err(Error::shape("log_softmax_pick", format!("allowed class {bad} of {v}")));
                    }
                    let lse = log_sum_exp(set.iter().map(|&c| row[c]));
                    for &c in set {
                        p[c] = libm::exp(row[c] - lse);
                    }
                    lse
                }
            };
            out.data_mut()[r] = row[tgt] - lse;
        }
        let rg = self.rg(logits.0);
        Ok(self.push(out, Op::LogSoftmaxPick { logits: logits.0, targets: targets.to_vec(), allowed, probs }, rg))
    }

    /// Sums consecutive row segments of an `n x 1` column.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 || lens.iter().sum::<usize>() != t.rows() {
            return Err(Error::shape("segment_sum", format!("{:?} with segments {:?}", t.shape(), lens)));
        }
        let mut out = Tensor::zeros(lens.len(), 1);
        let mut r = 0;
        for (s, &l) in lens.iter().enumerate() {
            out.data_mut()[s] = t.data()[r..r + l].iter().sum();
            r += l;
        }
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::SegmentSum { x: x.0, lens: lens.to_vec() }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        Ok(self.sum_all(sq))
    }

    /// Runs the backward pass from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], j: usize) -> Option<&'g mut Tensor> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let [r, c] = self.val(j).shape();
        Some(grads[j].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => match out.by_param.get_mut(&id.0) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.by_param.insert(id.0, g.clone());
                }
            },
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, (g.data(), n, 1), (tb.data(), 1, n), ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, m, n, (ta.data(), 1, k), (g.data(), n, 1), gb.data_mut(), 1.0);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, (g.data(), n, 1), (tb.data(), k, 1), ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(n, m, k, (g.data(), 1, n), (ta.data(), k, 1), gb.data_mut(), 1.0);
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(&g.transpose());
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.add_assign(g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, gg), y) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gg * y;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, gg), y) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gg * y;
                    }
                }
            }
            &Op::Minimum(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let take_a: Vec<bool> = ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, gg), &t) in ga.data_mut().iter_mut().zip(g.data()).zip(&take_a) {
                        if t {
                            *x += gg;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, gg), &t) in gb.data_mut().iter_mut().zip(g.data()).zip(&take_a) {
                        if !t {
                            *x += gg;
                        }
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.add_assign(g);
                }
                if let Some(gr) = self.slot(grads, row) {
                    let n = g.cols();
                    let acc = gr.data_mut();
                    for r in 0..g.rows() {
                        for (a, b) in acc.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, x) {
                    for (a, b) in gx.data_mut().iter_mut().zip(g.data()) {
                        *a += s * b;
                    }
                }
            }
            &Op::Gelu(x) => {
                let tx = self.val(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, gg), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = libm::tanh(u);
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *a += gg * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            &Op::Exp(x) => {
                let y = self.val(i);
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, gg), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *a += gg * yy;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let tx = self.val(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, gg), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if v >= lo && v <= hi {
                            *a += gg;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = g.cols();
                let gam = self.val(*gamma).data().to_vec();
                if let Some(gg) = self.slot(grads, *gamma) {
                    let acc = gg.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..n {
                            acc[c] += g.data()[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    let acc = gb.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..n {
                            acc[c] += g.data()[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let acc = gx.data_mut();
                    let mut dxhat = vec![0.0; n];
                    for r in 0..g.rows() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            dxhat[c] = g.data()[r * n + c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            acc[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, seq_lens, probs } => {
                let src = self.val(*qkv).data();
                let Some(gq) = self.slot(grads, *qkv) else { return };
                let d = src.len() / seq_lens.iter().sum::<usize>().max(1) / 3;
                let dh = d / heads;
                let width = 3 * d;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let acc = gq.data_mut();
                let gd = g.data();
                let mut dp = Vec::new();
                let mut offset = 0;
                let mut pbase = 0;
                for &len in seq_lens {
                    for h in 0..*heads {
                        for i in 0..len {
                            let dout = &gd[(offset + i) * d + h * dh..][..dh];
                            let p = &probs[pbase + i * len..][..=i];
                            dp.clear();
                            let mut s = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                let vrow = (offset + j) * width + 2 * d + h * dh;
                                let dpj = dot(dout, &src[vrow..vrow + dh]);
                                for (a, o) in acc[vrow..vrow + dh].iter_mut().zip(dout) {
                                    *a += pj * o;
                                }
                                s += pj * dpj;
                                dp.push(dpj);
                            }
                            let qrow = (offset + i) * width + h * dh;
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (offset + j) * width + d + h * dh;
                                for c in 0..dh {
                                    acc[qrow + c] += ds * src[krow + c];
                                    acc[krow + c] += ds * src[qrow + c];
                                }
                            }
                        }
                        pbase += len * len;
                    }
                    offset += len;
                }
            }
            Op::Embedding { table: x, ids: idx } | Op::GatherRows { x, idx } => {
                let Some(gx) = self.slot(grads, *x) else { return };
                let n = g.cols();
                for (r, &row) in idx.iter().enumerate() {
                    for (a, b) in gx.row_slice_mut(row).iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *a += b;
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = self.val(i);
                let Some(gx) = self.slot(grads, *x) else { return };
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let proj = dot(yr, gr);
                    for ((a, yy), gg) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *a += (gg - yy * proj) / norm;
                    }
                }
            }
            Op::LogSoftmaxPick { logits, targets, allowed, probs } => {
                let Some(gl) = self.slot(grads, *logits) else { return };
                let v = gl.cols();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = gl.row_slice_mut(r);
                    let p = &probs[r * v..(r + 1) * v];
                    match allowed {
                        None => {
                            for (a, pp) in row.iter_mut().zip(p) {
                                *a -= gr * pp;
                            }
                        }
                        Some(sets) => {
                            for &c in &sets[r] {
                                row[c] -= gr * p[c];
                            }
                        }
                    }
                    row[t] += gr;
                }
            }
            Op::SegmentSum { x, lens } => {
                let Some(gx) = self.slot(grads, *x) else { return };
                let mut r = 0;
                for (s, &l) in lens.iter().enumerate() {
                    for a in &mut gx.data_mut()[r..r + l] {
                        *a += g.data()[s];
                    }
                    r += l;
                }
            }
            &Op::SumAll(x) => {
                let gv = g.item();
                if let Some(gx) = self.slot(grads, x) {
                    gx.data_mut().iter_mut().for_each(|a| *a += gv);
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(values.map(|v| libm::exp(v - max)).sum::<f64>())
}
