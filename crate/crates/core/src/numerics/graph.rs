//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns a
//! [`Gradients`] table. Nodes that do not depend on any gradient-requiring
//! leaf are skipped during the backward sweep, so frozen sub-models can share
//! a graph with trainable ones at no extra cost.
//!
//! All matrix-valued ops work on rank-2 activations laid out as
//! `(batch * seq_len) x width`; attention receives the batch geometry
//! explicitly.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::distribution::PROB_FLOOR;
use crate::numerics::Tensor;
use crate::scalar::{Scalar, Strides};

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Batch geometry for attention: `batch` sequences of `seq_len` rows each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
}

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    Sigmoid(usize),
    Gelu(usize),
    Sum(usize),
    ConcatCols(usize, usize),
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        shape: AttnShape,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    KlDiv {
        logits: usize,
        rows: Vec<usize>,
        target: Arc<Tensor<S>>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Operation tape. Not `Sync`: each thread builds its own graph.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&self, value: Arc<Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&self, t: Tensor<S>) -> Var<'_, S> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param(&self, t: Arc<Tensor<S>>) -> Var<'_, S> {
        self.push_shared(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&self, t: Arc<Tensor<S>>) -> Var<'_, S> {
        self.push_shared(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].needs_grad)
                    .map(|g| Tensor::new(nodes[id].value.shape().to_vec(), g).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to each of `params`, zero-filled for
    /// parameters the loss does not reach.
    pub fn grad(&self, loss: Var<'_, S>, params: &[Var<'_, S>]) -> Result<Vec<Tensor<S>>> {
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|p| grads.wrt(*p)).collect())
    }
}

/// Result of a backward sweep, indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `v` when it was not reached.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn acc<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], id: usize) -> &'a mut Vec<S> {
    let n = nodes[id].value.numel();
    grads[id].get_or_insert_with(|| vec![S::zero(); n])
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let val = |id: usize| -> &Tensor<S> { &nodes[id].value };
    let wants = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            if wants(*a) {
                let b_data = nodes[*b].value.data();
                let ga = acc(grads, nodes, *a);
                // dA += G (m x n) * B^T (n x k)
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    g,
                    Strides::row_major(n),
                    b_data,
                    Strides::transposed(n),
                    S::one(),
                    ga,
                    Strides::row_major(k),
                );
            }
            if wants(*b) {
                let a_data = nodes[*a].value.data();
                let gb = acc(grads, nodes, *b);
                // dB += A^T (k x m) * G (m x n)
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    a_data,
                    Strides::transposed(k),
                    g,
                    Strides::row_major(n),
                    S::one(),
                    gb,
                    Strides::row_major(n),
                );
            }
        }
        Op::Add(a, b) => {
            for &p in [a, b] {
                if wants(p) {
                    add_into(acc(grads, nodes, p), g);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                add_into(acc(grads, nodes, *a), g);
            }
            if wants(*b) {
                let gb = acc(grads, nodes, *b);
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            for (p, other) in [(*a, *b), (*b, *a)] {
                if wants(p) {
                    let o = nodes[other].value.data();
                    let gp = acc(grads, nodes, p);
                    for ((d, &gi), &oi) in gp.iter_mut().zip(g).zip(o) {
                        *d += gi * oi;
                    }
                }
            }
        }
        Op::AddBias(x, b) => {
            if wants(*x) {
                add_into(acc(grads, nodes, *x), g);
            }
            if wants(*b) {
                let width = val(*b).numel();
                let gb = acc(grads, nodes, *b);
                for row in g.chunks_exact(width) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(x, c) => {
            if wants(*x) {
                let gx = acc(grads, nodes, *x);
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
        }
        Op::AddScalar(x) => {
            if wants(*x) {
                add_into(acc(grads, nodes, *x), g);
            }
        }
        Op::Sigmoid(x) => {
            if wants(*x) {
                let y = node.value.data();
                let gx = acc(grads, nodes, *x);
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (S::one() - yi);
                }
            }
        }
        Op::Gelu(x) => {
            if wants(*x) {
                let xs = nodes[*x].value.data();
                let gx = acc(grads, nodes, *x);
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                    *d += gi * gelu_grad(xi);
                }
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                let gx = acc(grads, nodes, *x);
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (_, ca) = val(*a).dims2().unwrap();
            let (_, cb) = val(*b).dims2().unwrap();
            let width = ca + cb;
            if wants(*a) {
                let ga = acc(grads, nodes, *a);
                for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(width)) {
                    add_into(dst, &src[..ca]);
                }
            }
            if wants(*b) {
                let gb = acc(grads, nodes, *b);
                for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(width)) {
                    add_into(dst, &src[ca..]);
                }
            }
        }
        Op::Gather { table, indices } => {
            if wants(*table) {
                let width = val(*table).dims2().unwrap().1;
                let gt = acc(grads, nodes, *table);
                for (r, &ix) in indices.iter().enumerate() {
                    add_into(&mut gt[ix * width..(ix + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = val(*gamma).numel();
            if wants(*gamma) {
                let gg = acc(grads, nodes, *gamma);
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if wants(*beta) {
                let gb = acc(grads, nodes, *beta);
                for grow in g.chunks_exact(d) {
                    add_into(gb, grow);
                }
            }
            if wants(*x) {
                let gamma_v = nodes[*gamma].value.data();
                let gx = acc(grads, nodes, *x);
                let dn = S::from_usize(d).unwrap();
                let mut dxhat = vec![S::zero(); d];
                for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut sum_d = S::zero();
                    let mut sum_dh = S::zero();
                    for j in 0..d {
                        dxhat[j] = grow[j] * gamma_v[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hrow[j];
                    }
                    let scale = rstd[r] / dn;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += scale * (dn * dxhat[j] - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
        }
        Op::Attention { q, k, v, shape, probs } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *shape, probs);
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            if wants(*logits) {
                let vocab = val(*logits).dims2().unwrap().1;
                let scale = g[0] / S::from_usize(rows.len()).unwrap();
                let floor = S::lit(PROB_FLOOR);
                let gl = acc(grads, nodes, *logits);
                for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    if p[t] <= floor {
                        continue;
                    }
                    let out = &mut gl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        out[j] += scale * p[j];
                    }
                    out[t] -= scale;
                }
            }
        }
        Op::KlDiv {
            logits,
            rows,
            target,
            probs,
        } => {
            if wants(*logits) {
                let vocab = val(*logits).dims2().unwrap().1;
                let scale = g[0] / S::from_usize(rows.len()).unwrap();
                let floor = S::lit(PROB_FLOOR);
                let gl = acc(grads, nodes, *logits);
                for (i, &r) in rows.iter().enumerate() {
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let q = target.row(i);
                    // With a = q where p is above the floor: dL/dz = p * sum(a) - a.
                    let mut total = S::zero();
                    for j in 0..vocab {
                        if p[j] > floor {
                            total += q[j];
                        }
                    }
                    let out = &mut gl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        let a = if p[j] > floor { q[j] } else { S::zero() };
                        out[j] += scale * (p[j] * total - a);
                    }
                }
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// tanh through a single exp, which is markedly cheaper than libm's tanh.
fn fast_tanh<S: Scalar>(u: S) -> S {
    let e = (S::lit(-2.0) * u.abs()).exp();
    let t = (S::one() - e) / (S::one() + e);
    if u < S::zero() {
        -t
    } else {
        t
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    S::lit(0.5) * x * (S::one() + fast_tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let t = fast_tanh(c * (x + a * x * x * x));
    let half = S::lit(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    shape: AttnShape,
) -> (Vec<S>, Vec<S>) {
    let AttnShape { batch, seq_len: l, heads } = shape;
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![S::zero(); batch * l * d];
    let mut probs = vec![S::zero(); batch * heads * l * l];
    let mut scores = vec![S::zero(); l];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            let pbase = (b * heads + h) * l * l;
            for i in 0..l {
                let qi = &qd[(b * l + i) * d + col..(b * l + i) * d + col + dh];
                let mut max = S::neg_infinity();
                for j in 0..=i {
                    let kj = &kd[(b * l + j) * d + col..(b * l + j) * d + col + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut total = S::zero();
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let prow = &mut probs[pbase + i * l..pbase + (i + 1) * l];
                let orow = &mut out[(b * l + i) * d + col..(b * l + i) * d + col + dh];
                for j in 0..=i {
                    let p = scores[j] / total;
                    prow[j] = p;
                    let vj = &vd[(b * l + j) * d + col..(b * l + j) * d + col + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    g: &[S],
    (q, k, v): (usize, usize, usize),
    shape: AttnShape,
    probs: &[S],
) {
    let AttnShape { batch, seq_len: l, heads } = shape;
    let d = nodes[q].value.shape()[1];
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let (qd, kd, vd) = (
        nodes[q].value.data(),
        nodes[k].value.data(),
        nodes[v].value.data(),
    );
    let n = batch * l * d;
    let mut dq = vec![S::zero(); n];
    let mut dk = vec![S::zero(); n];
    let mut dv = vec![S::zero(); n];
    let mut dp = vec![S::zero(); l];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            let pbase = (b * heads + h) * l * l;
            let at = |i: usize| (b * l + i) * d + col;
            for i in 0..l {
                let gi = &g[at(i)..at(i) + dh];
                let prow = &probs[pbase + i * l..pbase + (i + 1) * l];
                let mut weighted = S::zero();
                for j in 0..=i {
                    let vj = &vd[at(j)..at(j) + dh];
                    dp[j] = dot(gi, vj);
                    weighted += prow[j] * dp[j];
                    let dvj = &mut dv[at(j)..at(j) + dh];
                    for (dvv, &gg) in dvj.iter_mut().zip(gi) {
                        *dvv += prow[j] * gg;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[at(i) + c] += ds * kd[at(j) + c];
                        dk[at(j) + c] += ds * qd[at(i) + c];
                    }
                }
            }
        }
    }
    for (id, delta) in [(q, dq), (k, dk), (v, dv)] {
        if nodes[id].needs_grad {
            add_into(acc(grads, nodes, id), &delta);
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn softmax_rows<S: Scalar>(logits: &Tensor<S>, rows: &[usize]) -> Vec<S> {
    let vocab = logits.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * vocab);
    for &r in rows {
        let row = logits.row(r);
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = S::zero();
        for &z in row {
            let e = (z - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    out
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<S>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.constant_shared(self.value())
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'g, S> {
        let ng = self.requires_grad();
        self.graph.push(value, op, ng)
    }

    fn binary(&self, other: &Var<'g, S>, value: Tensor<S>, op: Op<S>) -> Var<'g, S> {
        let ng = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, ng)
    }

    fn same_shape(&self, other: &Var<'g, S>, op: &'static str) -> Result<(Arc<Tensor<S>>, Arc<Tensor<S>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let out = crate::numerics::tensor::matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    fn zip_with(&self, other: &Var<'g, S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (a, b) = self.same_shape(other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let out = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`width` bias to every row.
    pub fn add_bias(&self, bias: &Var<'g, S>) -> Result<Var<'g, S>> {
        let (x, b) = (self.value(), bias.value());
        let (_, width) = x.dims2()?;
        if b.numel() != width {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            add_into(row, b.data());
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddBias(self.id, bias.id)))
    }

    /// `x @ w + b`.
    pub fn linear(&self, w: &Var<'g, S>, b: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.matmul(w)?.add_bias(b)
    }

    pub fn scale(&self, c: S) -> Var<'g, S> {
        let out = self.value().map(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: S) -> Var<'g, S> {
        let out = self.value().map(|x| x + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, S> {
        let out = self.value().map(sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g, S> {
        let out = self.value().map(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn sum(&self) -> Var<'g, S> {
        let total = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn concat_cols(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), other.value());
        let (ra, ca) = a.dims2()?;
        let (rb, cb) = b.dims2()?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.binary(other, out, Op::ConcatCols(self.id, other.id)))
    }

    /// Row lookup `table[indices[r]]`; `self` is the table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'g, S>> {
        let table = self.value();
        let out = table.select_rows(indices)?;
        Ok(self.unary(
            out,
            Op::Gather {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&self, gamma: &Var<'g, S>, beta: &Var<'g, S>) -> Result<Var<'g, S>> {
        let x = self.value();
        let (rows, d) = x.dims2()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let dn = S::from_usize(d).unwrap();
        let eps = S::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let ng = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(
            Tensor::new(vec![rows, d], out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Causal multi-head scaled dot-product attention. `self` supplies the
    /// queries; position `i` attends to key/value positions `0..=i` of the
    /// same sequence.
    pub fn causal_attention(&self, k: &Var<'g, S>, v: &Var<'g, S>, shape: AttnShape) -> Result<Var<'g, S>> {
        let (q, kt, vt) = (self.value(), k.value(), v.value());
        let (rows, d) = q.dims2()?;
        if kt.shape() != q.shape() || vt.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: q.shape().to_vec(),
                right: if kt.shape() != q.shape() { kt.shape().to_vec() } else { vt.shape().to_vec() },
            });
        }
        if rows != shape.batch * shape.seq_len || shape.heads == 0 || d % shape.heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: q.shape().to_vec(),
                right: vec![shape.batch, shape.seq_len, shape.heads],
            });
        }
        let (out, probs) = attention_forward(&q, &kt, &vt, shape);
        let ng = self.requires_grad() || k.requires_grad() || v.requires_grad();
        Ok(self.graph.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of softmax(`self`) against `targets` over the
    /// listed `rows` of a `rows x vocab` logit matrix.
    pub fn cross_entropy_rows(&self, rows: &[usize], targets: &[usize]) -> Result<Var<'g, S>> {
        let logits = self.value();
        let (n, vocab) = logits.dims2()?;
        check_rows(rows, n, targets.len())?;
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange { index: t, size: vocab });
        }
        let probs = softmax_rows(&logits, rows);
        let floor = S::lit(PROB_FLOOR);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            total -= probs[i * vocab + t].max(floor).ln();
        }
        let loss = total / S::from_usize(rows.len()).unwrap();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean forward KL(`target` || softmax(`self`)) over the listed rows.
    /// `target` holds one probability row per entry of `rows`.
    pub fn kl_rows(&self, rows: &[usize], target: Arc<Tensor<S>>) -> Result<Var<'g, S>> {
        let logits = self.value();
        let (n, vocab) = logits.dims2()?;
        let (tr, tv) = target.dims2()?;
        if tv != vocab {
            return Err(Error::SupportMismatch { left: tv, right: vocab });
        }
        check_rows(rows, n, tr)?;
        let probs = softmax_rows(&logits, rows);
        let floor = S::lit(PROB_FLOOR);
        let mut total = S::zero();
        for i in 0..rows.len() {
            let q = target.row(i);
            for j in 0..vocab {
                if q[j] > S::zero() {
                    total += q[j] * (q[j].max(floor).ln() - probs[i * vocab + j].max(floor).ln());
                }
            }
        }
        let loss = total / S::from_usize(rows.len()).unwrap();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::KlDiv {
                logits: self.id,
                rows: rows.to_vec(),
                target,
                probs,
            },
        ))
    }
}

fn check_rows(rows: &[usize], n: usize, expected: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("loss over an empty row set".into()));
    }
    if rows.len() != expected {
        return Err(Error::LengthMismatch {
            left: rows.len(),
            right: expected,
        });
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::IndexOutOfRange { index: r, size: n });
    }
    Ok(())
}
