use std::cell::{Ref, RefCell};

use crate::tensor::{gemm, MatRef, Tensor};

use super::GradError;

/// Floor applied inside [`Var::ln`] so that a probability that underflowed
/// to zero yields a large finite loss instead of infinity.
pub const LOG_FLOOR: f64 = f64::MIN_POSITIVE;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `b` is broadcast over the leading axes of `a`.
    AddSuffix(usize, usize),
    /// `x[..., d] * m[...]`: each trailing vector scaled by one entry of `m`.
    ScaleRows(usize, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    Relu(usize),
    Ln(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { table: usize, ids: Vec<usize> },
    PickLast { x: usize, idx: Vec<usize> },
    Sum(usize),
    StraightThrough { hard: usize, soft: usize },
    PairwiseDistance { v: usize, dict: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, causal: bool, probs: Vec<f64> },
    Stack(Vec<usize>),
    SelectStep { x: usize, t: usize },
    ExclusiveCumprod(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A reverse-mode computation graph (a tape).
///
/// Every value produced while building a loss is recorded as a node. Nodes
/// derived only from constants are untracked and skipped during the backward
/// pass. A graph is single-threaded; build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`]: the differentiable value.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zeros if nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let value = x.value().clone();
        self.push(value, Op::Leaf, false)
    }

    /// Forward value is exactly `hard`; the backward pass routes the incoming
    /// gradient to both `hard` and `soft`, i.e. the result behaves as
    /// `hard + soft - stop_gradient(soft)` without the rounding of that sum.
    pub fn straight_through<'g>(&'g self, hard: Var<'g>, soft: Var<'g>) -> Result<Var<'g>, GradError> {
        let (hs, ss) = (hard.shape(), soft.shape());
        if hs != ss {
            return Err(GradError::ShapeMismatch { op: "straight_through", left: hs, right: ss });
        }
        let value = hard.value().clone();
        let tracked = self.tracked(hard.id) || self.tracked(soft.id);
        Ok(self.push(value, Op::StraightThrough { hard: hard.id, soft: soft.id }, tracked))
    }

    /// Stacks `[B, d]` values into a `[B, T, d]` sequence.
    pub fn stack<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "stack of zero parts");
        let nodes = self.nodes.borrow();
        let shape0 = nodes[parts[0].id].value.shape().to_vec();
        assert_eq!(shape0.len(), 2, "stack expects [B, d] parts");
        let (b, d) = (shape0[0], shape0[1]);
        let t = parts.len();
        let mut out = vec![0.0; b * t * d];
        let mut tracked = false;
        for (step, p) in parts.iter().enumerate() {
            let node = &nodes[p.id];
            assert_eq!(node.value.shape(), &shape0[..], "stack parts must share a shape");
            tracked |= node.tracked;
            for r in 0..b {
                out[(r * t + step) * d..(r * t + step + 1) * d].copy_from_slice(node.value.row(r));
            }
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new([b, t, d], out), Op::Stack(ids), tracked)
    }

    /// Runs the backward pass from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), 1.0));
        for i in (0..=root.id).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let contributions = backward_rule(&nodes, node, g);
            for (parent, contribution) in contributions {
                if !nodes[parent].tracked {
                    continue;
                }
                match &mut grads[parent] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().data().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let tracked = self.is_tracked() || other.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn zip_same(self, other: Var<'g>, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_same(other, "add", |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_same(other, "sub", |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = self.zip_same(other, "mul", |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// Adds `b`, whose shape must be a suffix of `self`'s shape (bias,
    /// positional table).
    pub fn add_broadcast(self, b: Var<'g>) -> Var<'g> {
        let value = {
            let x = self.value();
            let bv = b.value();
            let (xs, bs) = (x.shape(), bv.shape());
            assert!(
                bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
                "add_broadcast: {bs:?} is not a suffix of {xs:?}"
            );
            let n = bv.len();
            let mut out = x.data().to_vec();
            for chunk in out.chunks_mut(n) {
                for (o, v) in chunk.iter_mut().zip(bv.data()) {
                    *o += v;
                }
            }
            Tensor::new(xs.to_vec(), out)
        };
        self.binary(b, value, Op::AddSuffix(self.id, b.id))
    }

    /// Scales every trailing vector of `self` (shape `[..., d]`) by the
    /// matching entry of `m` (shape `[...]`).
    pub fn scale_rows(self, m: Var<'g>) -> Var<'g> {
        let value = {
            let x = self.value();
            let mv = m.value();
            assert_eq!(&x.shape()[..x.shape().len() - 1], mv.shape(), "scale_rows: shape mismatch");
            let d = x.last_dim();
            let mut out = x.data().to_vec();
            for (chunk, &s) in out.chunks_mut(d).zip(mv.data()) {
                for o in chunk {
                    *o *= s;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        };
        self.binary(m, value, Op::ScaleRows(self.id, m.id))
    }

    /// `alpha * self + beta`.
    pub fn affine(self, alpha: f64, beta: f64) -> Var<'g> {
        let v = self.value().map(|x| alpha * x + beta);
        self.unary(v, Op::Affine(self.id, alpha))
    }

    pub fn scale(self, alpha: f64) -> Var<'g> {
        self.affine(alpha, 0.0)
    }

    /// `self[..., k] · w[k, m]`.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        let value = {
            let a = self.value();
            let b = w.value();
            assert_eq!(b.shape().len(), 2, "matmul: right operand must be 2-D");
            let (k, m) = (b.shape()[0], b.shape()[1]);
            assert_eq!(a.last_dim(), k, "matmul: inner dimensions {:?} x {:?}", a.shape(), b.shape());
            let rows = a.rows();
            let mut out = vec![0.0; rows * m];
            gemm(rows, k, m, MatRef::rm(a.data(), k), MatRef::rm(b.data(), m), 0.0, &mut out);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = m;
            Tensor::new(shape, out)
        };
        self.binary(w, value, Op::MatMul(self.id, w.id))
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Natural logarithm, with inputs floored at [`LOG_FLOOR`].
    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(LOG_FLOOR).ln());
        self.unary(v, Op::Ln(self.id))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(self) -> Var<'g> {
        let v = softmax_rows(&self.value());
        self.unary(v, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        let (value, xhat, rstd) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let d = x.last_dim();
            assert_eq!(g.len(), d);
            assert_eq!(b.len(), d);
            let rows = x.rows();
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (Tensor::new(x.shape().to_vec(), out), xhat, rstd)
        };
        let tracked = self.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        self.graph.push(
            value,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            tracked,
        )
    }

    /// Rows of a `[V, d]` table selected by `ids`; output shape `[ids.len(), d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g> {
        let value = {
            let t = self.value();
            assert_eq!(t.shape().len(), 2, "gather_rows: table must be 2-D");
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                assert!(i < v, "gather_rows: index {i} out of range {v}");
                out.extend_from_slice(t.row(i));
            }
            Tensor::new([ids.len(), d], out)
        };
        self.unary(value, Op::GatherRows { table: self.id, ids: ids.to_vec() })
    }

    /// `out[r] = self[r, idx[r]]` over the flattened rows of `self`.
    pub fn pick_last(self, idx: &[usize]) -> Var<'g> {
        let value = {
            let x = self.value();
            assert_eq!(x.rows(), idx.len(), "pick_last: one index per row");
            let d = x.last_dim();
            let data = idx
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    assert!(i < d, "pick_last: index {i} out of range {d}");
                    x.data()[r * d + i]
                })
                .collect();
            Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), data)
        };
        self.unary(value, Op::PickLast { x: self.id, idx: idx.to_vec() })
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean distances between the rows of `self` (`[N, d]`) and the
    /// rows of `dict` (`[V, d]`); output `[N, V]`.
    pub fn pairwise_distance(self, dict: Var<'g>) -> Var<'g> {
        let value = {
            let x = self.value();
            let dv = dict.value();
            let d = x.last_dim();
            assert_eq!(dv.shape().len(), 2);
            assert_eq!(dv.shape()[1], d, "pairwise_distance: width mismatch");
            let (n, v) = (x.rows(), dv.shape()[0]);
            let mut out = vec![0.0; n * v];
            for r in 0..n {
                let xr = x.row(r);
                for i in 0..v {
                    let dist2: f64 = xr.iter().zip(dv.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    out[r * v + i] = dist2.sqrt();
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = v;
            Tensor::new(shape, out)
        };
        self.binary(dict, value, Op::PairwiseDistance { v: self.id, dict: dict.id })
    }

    /// Scaled dot-product attention with `heads` heads over
    /// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`. With `causal`, query `i` sees keys
    /// `j <= i + (Tk - Tq)`.
    pub fn attention(self, k: Var<'g>, v: Var<'g>, heads: usize, causal: bool) -> Var<'g> {
        let (value, probs) = {
            let (qv, kv, vv) = (self.value(), k.value(), v.value());
            attention_forward(&qv, &kv, &vv, heads, causal)
        };
        let tracked = self.is_tracked() || k.is_tracked() || v.is_tracked();
        self.graph.push(
            value,
            Op::Attention { q: self.id, k: k.id, v: v.id, heads, causal, probs },
            tracked,
        )
    }

    /// Step `t` of a `[B, T, d]` sequence, as `[B, d]`.
    pub fn select_step(self, t: usize) -> Var<'g> {
        let value = {
            let x = self.value();
            let s = x.shape();
            assert_eq!(s.len(), 3, "select_step expects [B, T, d]");
            let (b, steps, d) = (s[0], s[1], s[2]);
            assert!(t < steps);
            let mut out = Vec::with_capacity(b * d);
            for r in 0..b {
                out.extend_from_slice(&x.data()[(r * steps + t) * d..(r * steps + t + 1) * d]);
            }
            Tensor::new([b, d], out)
        };
        self.unary(value, Op::SelectStep { x: self.id, t })
    }

    /// `out[..., i] = prod_{k < i} self[..., k]` along the last axis
    /// (`out[..., 0] = 1`).
    pub fn exclusive_cumprod(self) -> Var<'g> {
        let value = {
            let x = self.value();
            let d = x.last_dim();
            let mut out = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let mut acc = 1.0;
                for i in 0..d {
                    out[r * d + i] = acc;
                    acc *= x.data()[r * d + i];
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        };
        self.unary(value, Op::ExclusiveCumprod(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = self.value().clone().reshaped(shape);
        self.unary(v, Op::Reshape(self.id))
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (usize, usize, usize, usize) {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    assert!(qs.len() == 3 && ks.len() == 3, "attention expects [B, T, D] inputs");
    assert_eq!(ks, vs, "attention: key/value shape mismatch");
    assert_eq!(qs[0], ks[0], "attention: batch mismatch");
    assert_eq!(qs[2], ks[2], "attention: width mismatch");
    assert_eq!(qs[2] % heads, 0, "attention: width not divisible by heads");
    (qs[0], qs[1], ks[1], qs[2])
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> (Tensor, Vec<f64>) {
    let (b, tq, tk, dm) = attention_dims(q, k, v, heads);
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = tk as isize - tq as isize;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * tq * dm];
    let mut probs = vec![0.0; b * heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let visible = if causal { ((i as isize + offset + 1).clamp(0, tk as isize)) as usize } else { tk };
                let qrow = &qd[(bi * tq + i) * dm + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(visible) {
                    let krow = &kd[(bi * tk + j) * dm + h * dh..][..dh];
                    *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let p = &mut probs[((bi * heads + h) * tq + i) * tk..][..tk];
                let mut total = 0.0;
                for j in 0..visible {
                    p[j] = (scores[j] - max).exp();
                    total += p[j];
                }
                let o = &mut out[(bi * tq + i) * dm + h * dh..][..dh];
                for j in 0..visible {
                    p[j] /= total;
                    let vrow = &vd[(bi * tk + j) * dm + h * dh..][..dh];
                    for (oc, vc) in o.iter_mut().zip(vrow) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
    }
    (Tensor::new([b, tq, dm], out), probs)
}

fn value(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

/// Gradient contributions of `node` to its parents, given its own gradient.
fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let needs = |id: usize| nodes[id].tracked;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let mut out = Vec::new();
            if needs(*a) {
                out.push((*a, zip(g, value(nodes, *b), |x, y| x * y)));
            }
            if needs(*b) {
                out.push((*b, zip(g, value(nodes, *a), |x, y| x * y)));
            }
            out
        }
        Op::AddSuffix(a, b) => {
            let mut out = vec![(*a, g.clone())];
            if needs(*b) {
                let bv = value(nodes, *b);
                let mut acc = vec![0.0; bv.len()];
                for chunk in g.data().chunks(bv.len()) {
                    for (s, v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                out.push((*b, Tensor::new(bv.shape().to_vec(), acc)));
            }
            out
        }
        Op::ScaleRows(x, m) => {
            let xv = value(nodes, *x);
            let mv = value(nodes, *m);
            let d = xv.last_dim();
            let mut out = Vec::new();
            if needs(*x) {
                let mut gx = g.data().to_vec();
                for (chunk, &s) in gx.chunks_mut(d).zip(mv.data()) {
                    for v in chunk {
                        *v *= s;
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), gx)));
            }
            if needs(*m) {
                let gm = g
                    .data()
                    .chunks(d)
                    .zip(xv.data().chunks(d))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                out.push((*m, Tensor::new(mv.shape().to_vec(), gm)));
            }
            out
        }
        Op::Affine(a, alpha) => vec![(*a, g.map(|v| alpha * v))],
        Op::MatMul(a, w) => {
            let av = value(nodes, *a);
            let wv = value(nodes, *w);
            let (k, m) = (wv.shape()[0], wv.shape()[1]);
            let rows = av.rows();
            let mut out = Vec::new();
            if needs(*a) {
                let mut ga = vec![0.0; rows * k];
                gemm(rows, m, k, MatRef::rm(g.data(), m), MatRef::rm_t(wv.data(), m), 0.0, &mut ga);
                out.push((*a, Tensor::new(av.shape().to_vec(), ga)));
            }
            if needs(*w) {
                let mut gw = vec![0.0; k * m];
                gemm(k, rows, m, MatRef::rm_t(av.data(), k), MatRef::rm(g.data(), m), 0.0, &mut gw);
                out.push((*w, Tensor::new([k, m], gw)));
            }
            out
        }
        Op::Relu(a) => vec![(*a, zip(g, value(nodes, *a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Ln(a) => vec![(*a, zip(g, value(nodes, *a), |gv, x| if x > LOG_FLOOR { gv / x } else { 0.0 }))],
        Op::Softmax(a) => {
            let y = &node.value;
            let d = y.last_dim();
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    out[c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![(*a, Tensor::new(y.shape().to_vec(), gx))]
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gv = value(nodes, *gamma);
            let d = gv.len();
            let rows = rstd.len();
            let mut out = Vec::new();
            if needs(*x) {
                let mut gx = vec![0.0; rows * d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        dxhat[c] = gr[c] * gv.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        gx[r * d + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                out.push((*x, Tensor::new(value(nodes, *x).shape().to_vec(), gx)));
            }
            if needs(*gamma) {
                let mut gg = vec![0.0; d];
                for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                    }
                }
                out.push((*gamma, Tensor::new(gv.shape().to_vec(), gg)));
            }
            if needs(*beta) {
                let mut gb = vec![0.0; d];
                for gr in g.data().chunks(d) {
                    for c in 0..d {
                        gb[c] += gr[c];
                    }
                }
                out.push((*beta, Tensor::new(value(nodes, *beta).shape().to_vec(), gb)));
            }
            out
        }
        Op::GatherRows { table, ids } => {
            let tv = value(nodes, *table);
            let d = tv.last_dim();
            let mut gt = Tensor::zeros(tv.shape().to_vec());
            for (r, &i) in ids.iter().enumerate() {
                let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                for (o, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            vec![(*table, gt)]
        }
        Op::PickLast { x, idx } => {
            let xv = value(nodes, *x);
            let d = xv.last_dim();
            let mut gx = Tensor::zeros(xv.shape().to_vec());
            for (r, &i) in idx.iter().enumerate() {
                gx.data_mut()[r * d + i] = g.data()[r];
            }
            vec![(*x, gx)]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(value(nodes, *a).shape().to_vec(), g.item()))],
        Op::StraightThrough { hard, soft } => vec![(*hard, g.clone()), (*soft, g.clone())],
        Op::PairwiseDistance { v, dict } => {
            let xv = value(nodes, *v);
            let dv = value(nodes, *dict);
            let l = &node.value;
            let d = xv.last_dim();
            let nv = dv.shape()[0];
            let mut gx = vec![0.0; xv.len()];
            let mut gd = vec![0.0; dv.len()];
            for r in 0..xv.rows() {
                for i in 0..nv {
                    let dist = l.data()[r * nv + i];
                    let coeff = g.data()[r * nv + i];
                    if dist == 0.0 || coeff == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let diff = (xv.data()[r * d + c] - dv.data()[i * d + c]) * coeff / dist;
                        gx[r * d + c] += diff;
                        gd[i * d + c] -= diff;
                    }
                }
            }
            vec![
                (*v, Tensor::new(xv.shape().to_vec(), gx)),
                (*dict, Tensor::new(dv.shape().to_vec(), gd)),
            ]
        }
        Op::Attention { q, k, v, heads, causal, probs } => {
            attention_backward(nodes, g, *q, *k, *v, *heads, *causal, probs)
        }
        Op::Stack(parts) => {
            let s = g.shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            parts
                .iter()
                .enumerate()
                .filter(|(_, &p)| needs(p))
                .map(|(step, &p)| {
                    let mut gp = Vec::with_capacity(b * d);
                    for r in 0..b {
                        gp.extend_from_slice(&g.data()[(r * t + step) * d..(r * t + step + 1) * d]);
                    }
                    (p, Tensor::new([b, d], gp))
                })
                .collect()
        }
        Op::SelectStep { x, t } => {
            let xv = value(nodes, *x);
            let s = xv.shape();
            let (b, steps, d) = (s[0], s[1], s[2]);
            let mut gx = Tensor::zeros(s.to_vec());
            for r in 0..b {
                gx.data_mut()[(r * steps + t) * d..(r * steps + t + 1) * d]
                    .copy_from_slice(&g.data()[r * d..(r + 1) * d]);
            }
            vec![(*x, gx)]
        }
        Op::ExclusiveCumprod(a) => {
            let xv = value(nodes, *a);
            let d = xv.last_dim();
            let mut gx = vec![0.0; xv.len()];
            for r in 0..xv.rows() {
                let x = &xv.data()[r * d..(r + 1) * d];
                let gr = &g.data()[r * d..(r + 1) * d];
                // d out[i] / d x[k] = prod_{j < i, j != k} x[j] for i > k
                for k in 0..d {
                    let mut prefix = 1.0;
                    for &xj in &x[..k] {
                        prefix *= xj;
                    }
                    let mut acc = 0.0;
                    let mut partial = prefix;
                    for i in k + 1..d {
                        acc += gr[i] * partial;
                        partial *= x[i];
                    }
                    gx[r * d + k] = acc;
                }
            }
            vec![(*a, Tensor::new(xv.shape().to_vec(), gx))]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(value(nodes, *a).shape().to_vec()))],
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    g: &Tensor,
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    causal: bool,
    probs: &[f64],
) -> Vec<(usize, Tensor)> {
    let (qv, kv, vv) = (value(nodes, q), value(nodes, k), value(nodes, v));
    let (b, tq, tk, dm) = attention_dims(qv, kv, vv, heads);
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = tk as isize - tq as isize;
    let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
    let mut gq = vec![0.0; qv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; tk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let visible = if causal { ((i as isize + offset + 1).clamp(0, tk as isize)) as usize } else { tk };
                let p = &probs[((bi * heads + h) * tq + i) * tk..][..tk];
                let go = &gd[(bi * tq + i) * dm + h * dh..][..dh];
                let mut dot = 0.0;
                for j in 0..visible {
                    let vrow = &vd[(bi * tk + j) * dm + h * dh..][..dh];
                    dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    let gvrow = &mut gv[(bi * tk + j) * dm + h * dh..][..dh];
                    for (o, gc) in gvrow.iter_mut().zip(go) {
                        *o += p[j] * gc;
                    }
                }
                let qrow = &qd[(bi * tq + i) * dm + h * dh..][..dh];
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &kd[(bi * tk + j) * dm + h * dh..][..dh];
                    let gqrow = &mut gq[(bi * tq + i) * dm + h * dh..][..dh];
                    for (o, kc) in gqrow.iter_mut().zip(krow) {
                        *o += ds * kc;
                    }
                    let gkrow = &mut gk[(bi * tk + j) * dm + h * dh..][..dh];
                    for (o, qc) in gkrow.iter_mut().zip(qrow) {
                        *o += ds * qc;
                    }
                }
            }
        }
    }
    vec![
        (q, Tensor::new(qv.shape().to_vec(), gq)),
        (k, Tensor::new(kv.shape().to_vec(), gk)),
        (v, Tensor::new(vv.shape().to_vec(), gv)),
    ]
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}
