//! A small tape-based reverse-mode differentiation engine over row-major
//! matrices.
//!
//! Every forward call appends a node holding its value; `backward` walks the
//! tape in reverse and accumulates gradients for trainable parameter leaves.
//! Nodes whose inputs never reach a trainable parameter are skipped during
//! the reverse sweep, so frozen prefixes of a network cost nothing there.

use std::borrow::Cow;

use crate::params::{ParamId, ParameterStore};
use crate::tensor::{axpy, dot, matmul_into, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Batched multi-head attention layout.
///
/// Queries hold `q_items * q_len` rows; keys and values hold
/// `kv_items * kv_len` rows. Query item `b` attends only to key/value item
/// `kv_index[b]`, which lets many text queries share one encoded image.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub kv_index: Vec<usize>,
    /// Per key row, `true` when the row may be attended to.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionLayout {
    /// One-to-one self-attention over `items` sequences of length `len`.
    pub fn self_attention(heads: usize, items: usize, len: usize, key_valid: Option<Vec<bool>>) -> Self {
        Self {
            heads,
            q_len: len,
            kv_len: len,
            kv_index: (0..items).collect(),
            key_valid,
        }
    }

    pub fn q_items(&self) -> usize {
        self.kv_index.len()
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ScaledSquaredError {
        pred: NodeId,
        target: Matrix<T>,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.index()].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    /// Element-wise sum of two gradient sets over the same store.
    pub fn merged(mut self, other: &Gradients<T>) -> Gradients<T> {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
        self
    }
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParameterStore<T>,
    trainable: Vec<bool>,
    nodes: Vec<Node<'a, T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Graph whose parameters never require gradients.
    pub fn inference(store: &'a ParameterStore<T>) -> Self {
        Self::with_trainable(store, vec![false; store.len()])
    }

    /// Graph where every parameter is differentiable.
    pub fn full(store: &'a ParameterStore<T>) -> Self {
        Self::with_trainable(store, vec![true; store.len()])
    }

    pub fn with_trainable(store: &'a ParameterStore<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            store,
            trainable,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: self.trainable[id.index()],
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::of(GELU_SCALE);
        let k = T::of(GELU_COEF);
        let half = T::of(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols);
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(kv.cols(), width);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(width % layout.heads, 0, "width must divide into heads");
        assert_eq!(qv.rows(), layout.q_items() * layout.q_len, "query rows");
        assert_eq!(kv.rows() % layout.kv_len, 0, "key rows");
        let kv_items = kv.rows() / layout.kv_len;
        assert!(layout.kv_index.iter().all(|&i| i < kv_items), "kv index range");
        if let Some(valid) = &layout.key_valid {
            assert_eq!(valid.len(), kv.rows());
        }
        let dh = width / layout.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (q_len, kv_len, heads) = (layout.q_len, layout.kv_len, layout.heads);
        let mut out = Matrix::zeros(qv.rows(), width);
        let mut probs = vec![T::zero(); layout.q_items() * heads * q_len * kv_len];
        let mut scores = vec![T::zero(); kv_len];
        for (b, &kb) in layout.kv_index.iter().enumerate() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..q_len {
                    let qrow = &qv.row(b * q_len + i)[cols.clone()];
                    let mut max = T::neg_infinity();
                    for j in 0..kv_len {
                        let kr = kb * kv_len + j;
                        let valid = layout.key_valid.as_ref().is_none_or(|m| m[kr]);
                        scores[j] = if valid {
                            let s = dot(qrow, &kv.row(kr)[cols.clone()]) * scale;
                            max = max.max(s);
                            s
                        } else {
                            T::neg_infinity()
                        };
                    }
                    assert!(max.is_finite(), "attention row has no valid keys");
                    let mut total = T::zero();
                    for s in scores.iter_mut() {
                        *s = if s.is_finite() { (*s - max).exp() } else { T::zero() };
                        total += *s;
                    }
                    let base = ((b * heads + h) * q_len + i) * kv_len;
                    let orow = &mut out.row_mut(b * q_len + i)[cols.clone()];
                    for j in 0..kv_len {
                        let p = scores[j] / total;
                        probs[base + j] = p;
                        if p != T::zero() {
                            axpy(p, &vv.row(kb * kv_len + j)[cols.clone()], orow);
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `q_items x heads x q_len x kv_len`.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&AttentionLayout, &[T])> {
        match &self.nodes[id.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: NodeId, index: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in &index {
            data.extend_from_slice(xv.row(r));
        }
        let out = Matrix::from_vec(index.len(), cols, data);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, index), ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts), ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts), ng)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let out = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Mean over rows of the two-or-more-way softmax cross-entropy.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for r in 0..n {
            let row = lv.row(r);
            assert!(targets[r] < c, "target out of range");
            let (argmax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            // log-sum-exp relative to the max, kept accurate when one logit dominates.
            let mut rest = T::zero();
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + i] = e;
                if i != argmax {
                    rest += e;
                }
            }
            let sum = T::one() + rest;
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= sum;
            }
            total += (max - row[targets[r]]) + rest.ln_1p();
        }
        let out = Matrix::from_vec(1, 1, vec![total / T::of(n as f64)]);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// `scale * sum((pred - target)^2)` with a constant target.
    pub fn scaled_squared_error(&mut self, pred: NodeId, target: Matrix<T>, scale: T) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "squared error shape mismatch");
        let mut acc = T::zero();
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            acc += (p - t) * (p - t);
        }
        let out = Matrix::from_vec(1, 1, vec![scale * acc]);
        let ng = self.ng(pred);
        self.push(out, Op::ScaledSquaredError { pred, target, scale }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Matrix<T>>> = vec![None; self.store.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut param_grads, id.index(), dout),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.ng(*a) {
                        let (n, k) = av.shape();
                        let m = bv.cols();
                        let mut da = Matrix::zeros(n, k);
                        for i in 0..n {
                            let drow = &dout.data()[i * m..(i + 1) * m];
                            for kk in 0..k {
                                da.data_mut()[i * k + kk] = dot(drow, bv.row(kk));
                            }
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        matmul_into(&av.transpose(), &dout, &mut db);
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.ng(*bias) {
                        let mut db = Matrix::zeros(1, dout.cols());
                        for r in 0..dout.rows() {
                            for (o, &d) in db.data_mut().iter_mut().zip(dout.row(r)) {
                                *o += d;
                            }
                        }
                        accumulate(&mut grads, bias.0, db);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, x.0, dout);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) && self.ng(*b) {
                        accumulate(&mut grads, a.0, dout.clone());
                        accumulate(&mut grads, b.0, dout);
                    } else if self.ng(*a) {
                        accumulate(&mut grads, a.0, dout);
                    } else {
                        accumulate(&mut grads, b.0, dout);
                    }
                }
                Op::Scale(x, s) => {
                    let mut dx = dout;
                    dx.scale(*s);
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Gelu(x) => {
                    let c = T::of(GELU_SCALE);
                    let k = T::of(GELU_COEF);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xv = self.value(*x);
                    let mut dx = dout;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let deriv = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *d *= deriv;
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dout;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = dout.shape();
                    let g = self.value(*gamma).data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            let drow = dout.row(r);
                            for c in 0..cols {
                                dg.data_mut()[c] += drow[c] * xhat[r * cols + c];
                                db.data_mut()[c] += drow[c];
                            }
                        }
                        if self.ng(*gamma) {
                            accumulate(&mut grads, gamma.0, dg);
                        }
                        if self.ng(*beta) {
                            accumulate(&mut grads, beta.0, db);
                        }
                    }
                    if self.ng(*x) {
                        let n = T::of(cols as f64);
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let drow = dout.row(r);
                            let xh = &xhat[r * cols..(r + 1) * cols];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..cols {
                                let dxh = drow[c] * g[c];
                                mean_d += dxh;
                                mean_dx += dxh * xh[c];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            let o = dx.row_mut(r);
                            for c in 0..cols {
                                o[c] = rstd[r] * (drow[c] * g[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &dout);
                    if self.ng(*q) {
                        accumulate(&mut grads, q.0, dq);
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads, k.0, dk);
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads, v.0, dv);
                    }
                }
                Op::GatherRows(x, index) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &src) in index.iter().enumerate() {
                        axpy(T::one(), dout.row(r), dx.row_mut(src));
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        if self.ng(*p) {
                            let slice = dout.data()[offset * cols..(offset + rows) * cols].to_vec();
                            accumulate(&mut grads, p.0, Matrix::from_vec(rows, cols, slice));
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        if self.ng(*p) {
                            let m = Matrix::from_fn(rows, cols, |r, c| dout.get(r, offset + c));
                            accumulate(&mut grads, p.0, m);
                        }
                        offset += cols;
                    }
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    accumulate(&mut grads, x.0, dout.reshaped(rows, cols));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (n, c) = self.value(*logits).shape();
                    let upstream = dout.get(0, 0) / T::of(n as f64);
                    let mut dl = Matrix::from_vec(n, c, probs.clone());
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dl.get(r, t) - T::one();
                        dl.set(r, t, v);
                    }
                    dl.scale(upstream);
                    accumulate(&mut grads, logits.0, dl);
                }
                Op::ScaledSquaredError { pred, target, scale } => {
                    let pv = self.value(*pred);
                    let f = T::of(2.0) * *scale * dout.get(0, 0);
                    let mut dp = pv.clone();
                    for (d, &t) in dp.data_mut().iter_mut().zip(target.data()) {
                        *d = f * (*d - t);
                    }
                    accumulate(&mut grads, pred.0, dp);
                }
            }
        }
        Gradients { grads: param_grads }
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttentionLayout,
        probs: &[T],
        dout: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let dh = width / layout.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (q_len, kv_len, heads) = (layout.q_len, layout.kv_len, layout.heads);
        let mut dq = Matrix::zeros(qv.rows(), width);
        let mut dk = Matrix::zeros(kv.rows(), width);
        let mut dv = Matrix::zeros(vv.rows(), width);
        let mut dp = vec![T::zero(); kv_len];
        for (b, &kb) in layout.kv_index.iter().enumerate() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..q_len {
                    let qr = b * q_len + i;
                    let base = ((b * heads + h) * q_len + i) * kv_len;
                    let p = &probs[base..base + kv_len];
                    let drow = &dout.row(qr)[cols.clone()];
                    let mut weighted = T::zero();
                    for j in 0..kv_len {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let kr = kb * kv_len + j;
                        dp[j] = dot(drow, &vv.row(kr)[cols.clone()]);
                        weighted += p[j] * dp[j];
                        axpy(p[j], drow, &mut dv.row_mut(kr)[cols.clone()]);
                    }
                    for j in 0..kv_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let kr = kb * kv_len + j;
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        axpy(ds, &kv.row(kr)[cols.clone()], &mut dq.row_mut(qr)[cols.clone()]);
                        axpy(ds, &qv.row(qr)[cols.clone()], &mut dk.row_mut(kr)[cols.clone()]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate<T: Scalar>(slots: &mut [Option<Matrix<T>>], idx: usize, g: Matrix<T>) {
    match &mut slots[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every scalar of every parameter.
    fn check(store: &mut ParameterStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> NodeId) {
        let analytic = {
            let mut g = Graph::full(store);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).len();
            for e in 0..n {
                let orig = store.value(id).data()[e];
                let h = 1e-5;
                store.value_mut(id).data_mut()[e] = orig + h;
                let plus = {
                    let mut g = Graph::inference(store);
                    let l = f(&mut g);
                    g.value(l).get(0, 0)
                };
                store.value_mut(id).data_mut()[e] = orig - h;
                let minus = {
                    let mut g = Graph::inference(store);
                    let l = f(&mut g);
                    g.value(l).get(0, 0)
                };
                store.value_mut(id).data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |m| m.data()[e]);
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "{} [{e}]: analytic {a} numeric {numeric}",
                    store.get(id).name
                );
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        for &(name, r, c) in shapes {
            s.register(name, ParamGroup::Fusion, r, c, Init::Normal(0.7), &mut rng);
        }
        s
    }

    #[test]
    fn dense_stack_gradients() {
        let mut store = store_with(
            &[("x", 3, 4), ("w", 4, 5), ("b", 1, 5), ("g", 1, 5), ("beta", 1, 5), ("w2", 5, 3)],
            1,
        );
        check(&mut store, |g| {
            let ids: Vec<_> = (0..6).map(ParamId).collect();
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let h = g.matmul(x, w);
            let h = g.add_bias(h, b);
            let gam = g.param(ids[3]);
            let bet = g.param(ids[4]);
            let h = g.layer_norm(h, gam, bet);
            let h = g.gelu(h);
            let w2 = g.param(ids[5]);
            let o = g.matmul(h, w2);
            g.softmax_cross_entropy(o, vec![0, 2, 1])
        });
    }

    #[test]
    fn attention_gradients_with_mask_and_sharing() {
        let mut store = store_with(&[("q", 6, 4), ("k", 6, 4), ("v", 6, 4)], 2);
        check(&mut store, |g| {
            let q = g.param(ParamId(0));
            let k = g.param(ParamId(1));
            let v = g.param(ParamId(2));
            let layout = AttentionLayout {
                heads: 2,
                q_len: 2,
                kv_len: 3,
                kv_index: vec![0, 1, 0],
                key_valid: Some(vec![true, true, false, true, true, true]),
            };
            let a = g.attention(q, k, v, layout);
            let t = Matrix::from_fn(6, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
            g.scaled_squared_error(a, t, 0.5)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut store = store_with(&[("a", 2, 3), ("b", 1, 3), ("c", 3, 2)], 3);
        check(&mut store, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let c = g.param(ParamId(2));
            let rows = g.concat_rows(vec![a, b]);
            let picked = g.gather_rows(rows, vec![2, 0, 0, 1]);
            let cols = g.concat_cols(vec![picked, picked]);
            let r = g.reshape(cols, 2, 12);
            let s = g.scale(r, 1.5);
            let s = g.reshape(s, 4, 6);
            let cc = g.concat_rows(vec![c, c]);
            let ccr = g.reshape(cc, 6, 2);
            let prod = g.matmul(s, ccr);
            let sum = g.add(prod, prod);
            g.softmax_cross_entropy(sum, vec![1, 0, 1, 1])
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let store = store_with(&[("q", 4, 4), ("k", 8, 4)], 4);
        let mut g = Graph::inference(&store);
        let q = g.param(ParamId(0));
        let k = g.param(ParamId(1));
        let layout = AttentionLayout {
            heads: 2,
            q_len: 2,
            kv_len: 4,
            kv_index: vec![1, 0],
            key_valid: None,
        };
        let a = g.attention(q, k, k, layout);
        let (_, probs) = g.attention_probs(a).unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn saturated_cross_entropy_is_tiny() {
        let store = ParameterStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let l = g.constant(Matrix::from_vec(1, 2, vec![30.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, vec![0]);
        let v = g.value(loss).get(0, 0);
        assert!(v > 0.0 && v < 1e-12, "{v}");
    }
}
