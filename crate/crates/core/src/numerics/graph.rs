//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits every
//! node after all of its consumers. Only the operations the encoder, the
//! codebook and the losses need are provided; the heavier ones (attention,
//! layer norm, squared distances) are fused with hand-written backward rules.

use std::collections::{BTreeMap, BTreeSet};

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Gelu { a: Var, tanh: Vec<f64> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    SqDist { x: Var, v: Var },
    RowSum(Var),
    SumAll(Var),
    SelectRows { a: Var, idx: Vec<usize> },
    SubstituteRows { a: Var, row: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
    RowL2Normalize(Var),
    /// Value depends on the input but carries no gradient (argmax and friends).
    NonDiff(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// How straight-through nodes pick their forward value.
///
/// `Live` returns the hard sample. `Record` does the same and remembers the
/// sample together with the soft relaxation at this point; `Replay` returns
/// `hard + (soft - soft_recorded)`, which equals the recorded hard sample at
/// the recording point and whose derivative is the straight-through gradient.
/// Gradient checking uses the latter pair.
#[derive(Clone, Debug, Default)]
pub enum AnchorMode {
    #[default]
    Live,
    Record(Vec<(Tensor, Tensor)>),
    Replay { anchors: Vec<(Tensor, Tensor)>, cursor: usize },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    anchors: AnchorMode,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_anchors(anchors: AnchorMode) -> Self {
        Graph {
            anchors,
            ..Self::default()
        }
    }

    pub fn take_anchors(&mut self) -> AnchorMode {
        std::mem::take(&mut self.anchors)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = as_matrix(store.get(name)?.clone());
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {k2} ([{ra},{ca}]{} x [{rb},{cb}]{})",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            mat_strides(ca, ta),
            self.value(b).data(),
            mat_strides(cb, tb),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::matrix(x.rows(), x.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |p, q| p * q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: [{r},{c}] with {:?}",
                self.value(row).shape()
            )));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::AddRow { a, row }, ng))
    }

    /// Multiplies row `i` of `a` by `col[i]` for a `[r, 1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(Error::Shape(format!(
                "mul_col: [{r},{c}] with {:?}",
                self.value(col).shape()
            )));
        }
        let cv = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (chunk, s) in data.chunks_exact_mut(c).zip(&cv) {
            for x in chunk {
                *x *= s;
            }
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(Tensor::matrix(r, c, data), Op::MulCol { a, col }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let t = Tensor::matrix(t.rows(), t.cols(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + s).collect();
        let t = Tensor::matrix(t.rows(), t.cols(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::matrix(t.rows(), t.cols(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::Exp(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let tanh: Vec<f64> = t.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = t.data().iter().zip(&tanh).map(|(&x, &th)| 0.5 * x * (1.0 + th)).collect();
        let t = Tensor::matrix(t.rows(), t.cols(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu { a, tanh }, ng)
    }

    /// Row-wise layer normalization with learned `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for (o, row) in out.chunks_exact_mut(c).zip(t.data().chunks_exact(c)) {
            super::tensor::log_softmax_into(row, o);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for (o, row) in out.chunks_exact_mut(c).zip(t.data().chunks_exact(c)) {
            softmax_into(row, o);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(r, c, out), Op::Softmax(a), ng)
    }

    /// `out[i, k] = ||x_i - v_k||²` for `x: [n, d]`, `v: [K, d]`.
    pub fn sq_dist(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let (k, d2) = self.dims(v);
        if d != d2 {
            return Err(Error::Shape(format!("sq_dist dims {d} vs {d2}")));
        }
        let out = sq_dist_matrix(self.value(x).data(), self.value(v).data(), n, k, d);
        let ng = self.ng(&[x, v]);
        Ok(self.push(Tensor::matrix(n, k, out), Op::SqDist { x, v }, ng))
    }

    /// `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        let t = Tensor::matrix(data.len(), 1, data);
        let ng = self.ng(&[a]);
        self.push(t, Op::RowSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape(format!("row {bad} out of {}", t.rows())));
        }
        if idx.is_empty() {
            return Err(Error::Shape("select_rows with no rows".into()));
        }
        let out = t.select_rows(idx);
        let ng = self.ng(&[a]);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Copy of `a` with the listed rows replaced by the `[1, c]` row `row`.
    pub fn substitute_rows(&mut self, a: Var, row: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::Shape("substitute_rows width".into()));
        }
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.last().is_some_and(|&i| i >= r) {
            return Err(Error::Shape("substitute_rows index out of range".into()));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for &i in &idx {
            out.row_mut(i).copy_from_slice(&rv);
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::SubstituteRows { a, row, idx }, ng))
    }

    /// `out[i] = a[i, idx[i]]`, shape `[r, 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape("gather_cols indices".into()));
        }
        let t = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::matrix(r, 1, data),
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q`, `k`, `v` are `[n, h]`; row `i` of segment `s` attends to rows of
    /// the same segment only, and with `causal` only to rows `<= i`. When
    /// `key_valid` is given, invalid rows are never attended to; a query with
    /// no admissible key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, h) = self.dims(q);
        if self.dims(k) != (n, h) || self.dims(v) != (n, h) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {h}")));
        }
        if segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::Shape("attention segment out of range".into()));
        }
        if key_valid.is_some_and(|m| m.len() != n) {
            return Err(Error::Shape("attention key mask length".into()));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * h];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            for hd in 0..heads {
                let base = seg.start * h + hd * dh;
                let p = &mut probs[off..off + l * l];
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    &qd[base..],
                    (h as isize, 1),
                    &kd[base..],
                    (1, h as isize),
                    0.0,
                    p,
                    (l as isize, 1),
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let lim = if causal { i + 1 } else { l };
                    if let Some(m) = key_valid {
                        for (s, &ok) in row[..lim].iter_mut().zip(&m[seg.start..]) {
                            if !ok {
                                *s = f64::NEG_INFINITY;
                            }
                        }
                    }
                    row[lim..].fill(0.0);
                    softmax_in_place(&mut row[..lim]);
                }
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    p,
                    (l as isize, 1),
                    &vd[base..],
                    (h as isize, 1),
                    0.0,
                    &mut out[base..],
                    (h as isize, 1),
                );
                off += l * l;
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(n, h, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Straight-through node: forward value is the hard sample, gradient
    /// flows to `soft` unchanged. See [`AnchorMode`].
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        let hard = as_matrix(hard);
        let sv = self.value(soft).clone();
        sv.check_same_shape(&hard, "straight_through")?;
        let value = match &mut self.anchors {
            AnchorMode::Live => hard,
            AnchorMode::Record(list) => {
                list.push((hard.clone(), sv));
                hard
            }
            AnchorMode::Replay { anchors, cursor } => {
                let (h, anchor) = anchors
                    .get(*cursor)
                    .ok_or_else(|| Error::NonDeterministic("straight-through replay ran out".into()))?;
                *cursor += 1;
                h.check_same_shape(&sv, "straight_through replay")?;
                let data = h
                    .data()
                    .iter()
                    .zip(sv.data())
                    .zip(anchor.data())
                    .map(|((&hv, &s), &a)| hv + (s - a))
                    .collect();
                Tensor::matrix(h.rows(), h.cols(), data)
            }
        };
        let ng = self.ng(&[soft]);
        Ok(self.push(value, Op::StraightThrough(soft), ng))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row {
                *x /= n;
            }
        }
        let t = Tensor::matrix(t.rows(), c, data);
        let ng = self.ng(&[a]);
        self.push(t, Op::RowL2Normalize(a), ng)
    }

    /// One-hot of each row's argmax (ties to the lowest index). No gradient.
    pub fn onehot_argmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            data[i * c + super::tensor::argmax(t.row(i))] = 1.0;
        }
        self.push(Tensor::matrix(r, c, data), Op::NonDiff(a), false)
    }

    /// Wraps a value computed outside the graph from `source`, with no
    /// gradient path back to it.
    pub fn nondiff(&mut self, source: Var, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::NonDiff(source), false)
    }

    /// Copy of `a` with no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf, false)
    }

    /// Parameters that reach the graph only through non-differentiable nodes
    /// somewhere upstream of `loss`.
    pub fn nondifferentiable_params(&self, loss: Var) -> BTreeSet<String> {
        let reach = self.ancestors(&[loss], true);
        let nondiff_inputs: Vec<Var> = (0..self.nodes.len())
            .filter(|&i| reach[i])
            .filter_map(|i| match self.nodes[i].op {
                Op::NonDiff(src) => Some(src),
                _ => None,
            })
            .collect();
        let behind = self.ancestors(&nondiff_inputs, false);
        self.params
            .iter()
            .filter(|(_, v)| behind[v.0])
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn ancestors(&self, roots: &[Var], stop_at_nondiff: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = roots.iter().map(|v| v.0).collect();
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if stop_at_nondiff && matches!(self.nodes[i].op, Op::NonDiff(_)) {
                continue;
            }
            stack.extend(self.nodes[i].op.inputs().into_iter().map(|v| v.0));
        }
        seen
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let t = self.value(*v);
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.by_name.insert(name.clone(), Tensor::matrix(t.rows(), t.cols(), g));
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::NonDiff(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (node.value.rows(), node.value.cols());
                let (ra, ca) = (av.rows(), av.cols());
                let k = if *ta { ra } else { ca };
                let sa = mat_strides(ca, *ta);
                let sb = mat_strides(bv.cols(), *tb);
                if wants(*a) {
                    let ga = grad_buf(grads, *a, av.numel());
                    // d op(A) = G · op(B)^T, written through A's own strides.
                    gemm(m, n, k, 1.0, g, (n as isize, 1), bv.data(), (sb.1, sb.0), 1.0, ga, sa);
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, bv.numel());
                    gemm(k, m, n, 1.0, av.data(), (sa.1, sa.0), g, (n as isize, 1), 1.0, gb, sb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(grad_buf(grads, v, g.len()), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(grad_buf(grads, *a, g.len()), 1.0, g);
                }
                if wants(*b) {
                    axpy(grad_buf(grads, *b, g.len()), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, g.len());
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddRow { a, row } => {
                let c = node.value.cols();
                if wants(*a) {
                    axpy(grad_buf(grads, *a, g.len()), 1.0, g);
                }
                if wants(*row) {
                    let gr = grad_buf(grads, *row, c);
                    for chunk in g.chunks_exact(c) {
                        for (o, x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulCol { a, col } => {
                let c = node.value.cols();
                let (av, cv) = (val(*a).data(), val(*col).data());
                if wants(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for ((o, gi), s) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(cv) {
                        for (x, y) in o.iter_mut().zip(gi) {
                            *x += y * s;
                        }
                    }
                }
                if wants(*col) {
                    let gc = grad_buf(grads, *col, cv.len());
                    for ((o, gi), ar) in gc.iter_mut().zip(g.chunks_exact(c)).zip(av.chunks_exact(c)) {
                        *o += gi.iter().zip(ar).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => axpy(grad_buf(grads, *a, g.len()), *s, g),
            Op::AddScalar(a) => axpy(grad_buf(grads, *a, g.len()), 1.0, g),
            Op::Exp(a) => {
                let ga = grad_buf(grads, *a, g.len());
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *o += gi * y;
                }
            }
            Op::Gelu { a, tanh } => {
                let ga = grad_buf(grads, *a, g.len());
                for (((o, gi), &x), &t) in ga.iter_mut().zip(g).zip(val(*a).data()).zip(tanh) {
                    *o += gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let gg = grad_buf(grads, *gamma, c);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = grad_buf(grads, *beta, c);
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for (i, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let out = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] += inv_std[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let ga = grad_buf(grads, *a, g.len());
                for ((o, gr), yr) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(node.value.data().chunks_exact(c))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        o[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let ga = grad_buf(grads, *a, g.len());
                for ((o, gr), yr) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(node.value.data().chunks_exact(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        o[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SqDist { x, v } => {
                let (xv, vv) = (val(*x), val(*v));
                let (n, d) = (xv.rows(), xv.cols());
                let k = vv.rows();
                if wants(*x) {
                    let gx = grad_buf(grads, *x, n * d);
                    for i in 0..n {
                        let xi = xv.row(i);
                        for kk in 0..k {
                            let w = 2.0 * g[i * k + kk];
                            if w == 0.0 {
                                continue;
                            }
                            let vk = vv.row(kk);
                            for j in 0..d {
                                gx[i * d + j] += w * (xi[j] - vk[j]);
                            }
                        }
                    }
                }
                if wants(*v) {
                    let gv = grad_buf(grads, *v, k * d);
                    for i in 0..n {
                        let xi = xv.row(i);
                        for kk in 0..k {
                            let w = 2.0 * g[i * k + kk];
                            if w == 0.0 {
                                continue;
                            }
                            let vk = vv.row(kk);
                            for j in 0..d {
                                gv[kk * d + j] -= w * (xi[j] - vk[j]);
                            }
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let c = av.cols();
                let ga = grad_buf(grads, *a, av.numel());
                for (o, gi) in ga.chunks_exact_mut(c).zip(g) {
                    for x in o {
                        *x += gi;
                    }
                }
            }
            Op::SumAll(a) => {
                let ga = grad_buf(grads, *a, val(*a).numel());
                for x in ga {
                    *x += g[0];
                }
            }
            Op::SelectRows { a, idx } => {
                let av = val(*a);
                let c = av.cols();
                let ga = grad_buf(grads, *a, av.numel());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[r * c + j];
                    }
                }
            }
            Op::SubstituteRows { a, row, idx } => {
                let c = node.value.cols();
                if wants(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    let mut pos = 0;
                    for (i, (o, gr)) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        if pos < idx.len() && idx[pos] == i {
                            pos += 1;
                            continue;
                        }
                        axpy(o, 1.0, gr);
                    }
                }
                if wants(*row) {
                    let gr = grad_buf(grads, *row, c);
                    for &i in idx {
                        axpy(gr, 1.0, &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::GatherCols { a, idx } => {
                let c = val(*a).cols();
                let ga = grad_buf(grads, *a, val(*a).numel());
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads),
            Op::StraightThrough(soft) => axpy(grad_buf(grads, *soft, g.len()), 1.0, g),
            Op::RowL2Normalize(a) => {
                let av = val(*a);
                let c = av.cols();
                let ga = grad_buf(grads, *a, av.numel());
                for ((o, gr), (xr, yr)) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(av.data().chunks_exact(c).zip(node.value.data().chunks_exact(c)))
                {
                    let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        o[j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qv = self.value(q);
        let (n, h) = (qv.rows(), qv.cols());
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; n * h];
        let mut dk = vec![0.0; n * h];
        let mut dv = vec![0.0; n * h];
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            let mut dp = vec![0.0; l * l];
            for hd in 0..heads {
                let base = seg.start * h + hd * dh;
                let p = &probs[off..off + l * l];
                let hs = h as isize;
                // dV = P^T dO
                gemm(l, l, dh, 1.0, p, (1, l as isize), &g[base..], (hs, 1), 1.0, &mut dv[base..], (hs, 1));
                // dP = dO V^T
                gemm(l, dh, l, 1.0, &g[base..], (hs, 1), &vd[base..], (1, hs), 0.0, &mut dp, (l as isize, 1));
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(l, l, dh, 1.0, &dp, (l as isize, 1), &kd[base..], (hs, 1), 1.0, &mut dq[base..], (hs, 1));
                gemm(l, l, dh, 1.0, &dp, (1, l as isize), &qd[base..], (hs, 1), 1.0, &mut dk[base..], (hs, 1));
                off += l * l;
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                axpy(grad_buf(grads, var, n * h), 1.0, &d);
            }
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::MulCol { a, col } => vec![*a, *col],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Gelu { a, .. }
            | Op::LogSoftmax(a)
            | Op::Softmax(a)
            | Op::RowSum(a)
            | Op::SumAll(a)
            | Op::StraightThrough(a)
            | Op::RowL2Normalize(a)
            | Op::NonDiff(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SqDist { x, v } => vec![*x, *v],
            Op::SelectRows { a, .. } | Op::GatherCols { a, .. } => vec![*a],
            Op::SubstituteRows { a, row, .. } => vec![*a, *row],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        Tensor::matrix(r, c, t.into_data())
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

fn mat_strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c = alpha·A·B + beta·c` on strided views; `A` is `[m, k]`, `B` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    beta: f64,
    c: &mut [f64],
    sc: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, cl: usize, s: (isize, isize)| {
        if r == 0 || cl == 0 {
            0
        } else {
            (r as isize - 1) * s.0 + (cl as isize - 1) * s.1 + 1
        }
    };
    assert!(span(m, k, sa) as usize <= a.len(), "gemm: A view out of bounds");
    assert!(span(k, n, sb) as usize <= b.len(), "gemm: B view out of bounds");
    assert!(span(m, n, sc) as usize <= c.len(), "gemm: C view out of bounds");
    // SAFETY: the three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

pub(crate) fn sq_dist_matrix(x: &[f64], v: &[f64], n: usize, k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for kk in 0..k {
            let vk = &v[kk * d..(kk + 1) * d];
            out[i * k + kk] = xi.iter().zip(vk).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    out
}

fn softmax_into(values: &[f64], out: &mut [f64]) {
    out.copy_from_slice(values);
    softmax_in_place(out);
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = 1.0 / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh(sqrt(2/pi)·(x + 0.044715·x³))` through a single `exp`.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn sum_gives_ones() {
        let s = store_with("w", Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let l = g.sum_all(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_norm_gives_identity() {
        let s = store_with("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let sum = g.sum_all(sq);
        let l = g.scale(sum, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_non_scalar_and_non_finite_losses() {
        let s = store_with("w", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        assert!(matches!(g.backward(w), Err(Error::Shape(_))));
        let sum = g.sum_all(w);
        let big = g.scale(sum, f64::INFINITY);
        assert!(matches!(g.backward(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::matrix(1, 2, vec![1.0, 2.0]), true).unwrap();
        s.insert("b", Tensor::matrix(2, 2, vec![1.0; 4]), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&s, "a").unwrap();
        let b = g.param(&s, "b").unwrap();
        let _unused = g.matmul(a, b).unwrap();
        let l = g.sum_all(a);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn transposed_matmul_matches_plain() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.0, -2.0]);
        let mut g = Graph::new();
        let av = g.constant(a);
        let bv = g.constant(b);
        let c = g.matmul_t(av, bv, false, true).unwrap();
        assert_eq!(g.value(c).data(), &[4.5, -5.0, 9.0, -8.0]);
        let d = g.matmul_t(av, bv, true, false).unwrap();
        assert_eq!(g.value(d).shape(), &[3, 3]);
        assert_eq!(g.value(d).data()[0], 1.0 * 0.5 + 4.0 * 1.0);
    }

    #[test]
    fn causal_attention_blocks_future_keys() {
        let n = 4;
        let q = Tensor::matrix(n, 2, (0..8).map(|i| i as f64 * 0.1).collect());
        let mut v2 = q.clone();
        v2.row_mut(3).copy_from_slice(&[9.0, -9.0]);
        let seg = [Segment { start: 0, len: n }];
        let run = |v: &Tensor| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let vv = g.constant(v.clone());
            let o = g.attention(qv, vv, vv, 1, &seg, true, None).unwrap();
            g.value(o).clone()
        };
        let (a, b) = (run(&q), run(&v2));
        assert_eq!(a.data()[..6], b.data()[..6]);
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn nondiff_params_are_detected() {
        let mut s = ParameterStore::new();
        s.insert("v", Tensor::matrix(2, 1, vec![0.0, 1.0]), true).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 1, vec![0.1, 0.9, 0.4]));
        let v = g.param(&s, "v").unwrap();
        let d = g.sq_dist(x, v).unwrap();
        let neg = g.scale(d, -1.0);
        let hard = g.onehot_argmax(neg);
        let c = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = g.mul(hard, c).unwrap();
        let l = g.sum_all(m);
        assert!(g.nondifferentiable_params(l).contains("v"));
        assert_eq!(g.backward(l).unwrap().get("v").unwrap().data(), &[0.0, 0.0]);
    }
}

