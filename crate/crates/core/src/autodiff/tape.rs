//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value and the data needed by
//! its backward rule. Node ids are assigned in creation order, so walking ids
//! downwards from the root is a valid reverse topological order.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    /// Tanh approximation, as used by CLIP/GPT-2 style MLPs.
    Gelu,
    Exp,
    Log,
}

/// How the smaller operand of a binary op is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand is a single value.
    ScalarRhs,
    ScalarLhs,
    /// Right operand is one row repeated over the rows of the left.
    RowRhs,
    RowLhs,
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        x: usize,
        factor: S,
    },
    Unary {
        x: usize,
        kind: Activation,
    },
    L1 {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    SoftmaxRows {
        x: usize,
        inv_temp: S,
    },
    LogSoftmaxRows {
        x: usize,
        inv_temp: S,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    Pick {
        x: usize,
        index: Vec<usize>,
    },
    CosineRows {
        a: usize,
        b: usize,
        /// Per output row: (cosine, |a|, |b|).
        stats: Vec<(S, S, S)>,
        b_broadcast: bool,
    },
    MeanRows {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        key_mask: Arc<[bool]>,
        probs: Vec<S>,
    },
}

pub(crate) struct Node<S> {
    pub(crate) value: Arc<Tensor<S>>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

/// Recording of one forward pass. Single-threaded by construction.
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                backward_done: false,
            }),
        }
    }

    /// Input that receives a gradient.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_rc(Arc::new(value), Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_rc(Arc::new(value), Op::Leaf, false)
    }

    /// Shares an existing buffer instead of copying it.
    pub fn input_rc(&self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var<'_, S> {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node. Requires exclusive access, so no `Var` can outlive it.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.backward_done = false;
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        self.push_rc(Arc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Arc<Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn value_rc(&self, id: usize) -> Arc<Tensor<S>> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a single-element root.
    ///
    /// A tape supports one sweep; a second call fails until [`Tape::reset`].
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Contract("root belongs to another tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if inner.nodes[root.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                inner.nodes[root.id].value.shape()
            )));
        }
        inner.backward_done = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), S::one()));
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the root.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<S>> {
        self.tape.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Copies the value out as a new constant, cutting the gradient path.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.input_rc(self.value(), false)
    }

    pub(crate) fn borrow_value(&self) -> Ref<'_, Tensor<S>> {
        Ref::map(self.tape.inner.borrow(), |i| &*i.nodes[self.id].value)
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: usize,
    contribution: Tensor<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: usize,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

/// Sum of `g` reduced onto the operand's (possibly broadcast) shape.
fn reduce_to<S: Scalar>(g: &[S], cols: usize, target: &Tensor<S>, scalar: bool) -> Tensor<S> {
    if scalar {
        return Tensor::full(target.shape(), g.iter().copied().sum());
    }
    let mut out = vec![S::zero(); cols];
    for row in g.chunks(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("broadcast row shape")
}

fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2();
            let (_, n) = bv.dims2();
            // dA = dC * B^T
            accumulate_with(nodes, grads, *a, |da| {
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    gd,
                    n as isize,
                    1,
                    bv.data(),
                    1,
                    n as isize,
                    S::one(),
                    da,
                    k as isize,
                    1,
                )
            });
            // dB = A^T * dC
            accumulate_with(nodes, grads, *b, |db| {
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    av.data(),
                    1,
                    k as isize,
                    gd,
                    n as isize,
                    1,
                    S::one(),
                    db,
                    n as isize,
                    1,
                )
            });
        }
        Op::Binary { kind, a, b, bcast } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let cols = out.dims2().1;
            // gradient w.r.t. each operand at full output size
            let full_a: Vec<S> = match kind {
                BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                BinaryKind::Mul => expand(bv, out.len(), cols, *bcast, false)
                    .zip(gd)
                    .map(|(x, &gi)| x * gi)
                    .collect(),
            };
            let full_b: Vec<S> = match kind {
                BinaryKind::Add => gd.to_vec(),
                BinaryKind::Sub => gd.iter().map(|&x| -x).collect(),
                BinaryKind::Mul => expand(av, out.len(), cols, *bcast, true)
                    .zip(gd)
                    .map(|(x, &gi)| x * gi)
                    .collect(),
            };
            let ga = match bcast {
                Broadcast::ScalarLhs => reduce_to(&full_a, cols, av, true),
                Broadcast::RowLhs => reduce_to(&full_a, cols, av, false),
                _ => Tensor::new(av.shape().to_vec(), full_a).unwrap(),
            };
            let gb = match bcast {
                Broadcast::ScalarRhs => reduce_to(&full_b, cols, bv, true),
                Broadcast::RowRhs => reduce_to(&full_b, cols, bv, false),
                _ => Tensor::new(bv.shape().to_vec(), full_b).unwrap(),
            };
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            accumulate_with(nodes, grads, *x, |dx| {
                for (d, &gi) in dx.iter_mut().zip(gd) {
                    *d += gi * f;
                }
            });
        }
        Op::Unary { x, kind } => {
            let xv = nodes[*x].value.data();
            let yv = out.data();
            let kind = *kind;
            accumulate_with(nodes, grads, *x, |dx| {
                for i in 0..dx.len() {
                    dx[i] += gd[i] * activation_grad(kind, xv[i], yv[i]);
                }
            });
        }
        Op::L1 { x } => {
            let xv = nodes[*x].value.data();
            let gi = gd[0];
            accumulate_with(nodes, grads, *x, |dx| {
                for (d, &xi) in dx.iter_mut().zip(xv) {
                    // subgradient of |x| at 0 is 0
                    if xi > S::zero() {
                        *d += gi;
                    } else if xi < S::zero() {
                        *d -= gi;
                    }
                }
            });
        }
        Op::Sum { x } => {
            let gi = gd[0];
            accumulate_with(nodes, grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gi));
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.len();
            let gi = gd[0] / S::lit(n as f64);
            accumulate_with(nodes, grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gi));
        }
        Op::SoftmaxRows { x, inv_temp } => {
            let cols = out.dims2().1;
            let y = out.data();
            let it = *inv_temp;
            accumulate_with(nodes, grads, *x, |dx| {
                for ((drow, yrow), grow) in dx
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(gd.chunks(cols))
                {
                    let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        drow[j] += it * yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows { x, inv_temp } => {
            let cols = out.dims2().1;
            let y = out.data();
            let it = *inv_temp;
            accumulate_with(nodes, grads, *x, |dx| {
                for ((drow, yrow), grow) in dx
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(gd.chunks(cols))
                {
                    let gsum: S = grow.iter().copied().sum();
                    for j in 0..cols {
                        drow[j] += it * (grow[j] - yrow[j].exp() * gsum);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let cols = out.dims2().1;
            let gam = nodes[*gamma].value.data();
            let n = S::lit(cols as f64);
            accumulate_with(nodes, grads, *gamma, |dg| {
                for (grow, hrow) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        dg[j] += grow[j] * hrow[j];
                    }
                }
            });
            accumulate_with(nodes, grads, *beta, |db| {
                for grow in gd.chunks(cols) {
                    for j in 0..cols {
                        db[j] += grow[j];
                    }
                }
            });
            accumulate_with(nodes, grads, *x, |dx| {
                let mut dh = vec![S::zero(); cols];
                for (r, (drow, (grow, hrow))) in dx
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols).zip(xhat.chunks(cols)))
                    .enumerate()
                {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..cols {
                        dh[j] = grow[j] * gam[j];
                        m1 += dh[j];
                        m2 += dh[j] * hrow[j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..cols {
                        drow[j] += inv_std[r] * (dh[j] - m1 - hrow[j] * m2);
                    }
                }
            });
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                let slice = &gd[offset..offset + len];
                accumulate_with(nodes, grads, p, |dp| {
                    for (d, &gi) in dp.iter_mut().zip(slice) {
                        *d += gi;
                    }
                });
                offset += len;
            }
        }
        Op::GatherRows { src, index } => {
            let cols = out.dims2().1;
            accumulate_with(nodes, grads, *src, |ds| {
                for (r, &i) in index.iter().enumerate() {
                    let grow = &gd[r * cols..(r + 1) * cols];
                    for (d, &gi) in ds[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                        *d += gi;
                    }
                }
            });
        }
        Op::Pick { x, index } => {
            let cols = nodes[*x].value.dims2().1;
            accumulate_with(nodes, grads, *x, |dx| {
                for (r, &j) in index.iter().enumerate() {
                    dx[r * cols + j] += gd[r];
                }
            });
        }
        Op::CosineRows {
            a,
            b,
            stats,
            b_broadcast,
        } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let cols = nodes[*a].value.dims2().1;
            let brow = |r: usize| if *b_broadcast { 0 } else { r };
            accumulate_with(nodes, grads, *a, |da| {
                for (r, &(c, na, nb)) in stats.iter().enumerate() {
                    let ar = &av[r * cols..(r + 1) * cols];
                    let br = &bv[brow(r) * cols..(brow(r) + 1) * cols];
                    let s1 = gd[r] / (na * nb);
                    let s2 = gd[r] * c / (na * na);
                    for j in 0..cols {
                        da[r * cols + j] += s1 * br[j] - s2 * ar[j];
                    }
                }
            });
            accumulate_with(nodes, grads, *b, |db| {
                for (r, &(c, na, nb)) in stats.iter().enumerate() {
                    let ar = &av[r * cols..(r + 1) * cols];
                    let bo = brow(r) * cols;
                    let s1 = gd[r] / (na * nb);
                    let s2 = gd[r] * c / (nb * nb);
                    for j in 0..cols {
                        let bj = bv[bo + j];
                        db[bo + j] += s1 * ar[j] - s2 * bj;
                    }
                }
            });
        }
        Op::MeanRows { x } => {
            let (rows, cols) = nodes[*x].value.dims2();
            let inv = S::one() / S::lit(rows as f64);
            accumulate_with(nodes, grads, *x, |dx| {
                for drow in dx.chunks_mut(cols) {
                    for j in 0..cols {
                        drow[j] += gd[j] * inv;
                    }
                }
            });
        }
        Op::Reshape { x } => {
            accumulate_with(nodes, grads, *x, |dx| {
                for (d, &gi) in dx.iter_mut().zip(gd) {
                    *d += gi;
                }
            });
        }
        Op::Transpose { x } => {
            let (rows, cols) = nodes[*x].value.dims2();
            accumulate_with(nodes, grads, *x, |dx| {
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] += gd[j * rows + i];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            key_mask,
            probs,
        } => attention_backward(
            nodes, grads, gd, *q, *k, *v, *seq_len, *heads, key_mask, probs,
        ),
    }
}

/// Iterator over the operand `t` expanded to the output layout.
fn expand<'a, S: Scalar>(
    t: &'a Tensor<S>,
    len: usize,
    cols: usize,
    bcast: Broadcast,
    is_lhs: bool,
) -> Box<dyn Iterator<Item = S> + 'a> {
    let d = t.data();
    let broadcast_here = match (bcast, is_lhs) {
        (Broadcast::ScalarLhs, true) | (Broadcast::ScalarRhs, false) => Some(true),
        (Broadcast::RowLhs, true) | (Broadcast::RowRhs, false) => Some(false),
        _ => None,
    };
    match broadcast_here {
        Some(true) => Box::new(std::iter::repeat_n(d[0], len)),
        Some(false) => Box::new((0..len).map(move |i| d[i % cols])),
        None => Box::new(d.iter().copied()),
    }
}

pub(crate) fn gelu_constants<S: Scalar>() -> (S, S) {
    (S::lit(0.797_884_560_802_865_4), S::lit(0.044_715))
}

fn activation_grad<S: Scalar>(kind: Activation, x: S, y: S) -> S {
    match kind {
        Activation::Sigmoid => y * (S::one() - y),
        Activation::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Gelu => {
            let (c, a) = gelu_constants::<S>();
            let half = S::lit(0.5);
            let three = S::lit(3.0);
            let t = (c * (x + a * x * x * x)).tanh();
            half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
        }
        Activation::Exp => y,
        Activation::Log => S::one() / x,
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    gd: &[S],
    q: usize,
    k: usize,
    v: usize,
    n: usize,
    heads: usize,
    mask: &[bool],
    probs: &[S],
) {
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let (rows, d) = nodes[q].value.dims2();
    let dh = d / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let seqs = rows / n;
    let mut dq = vec![S::zero(); rows * d];
    let mut dk = vec![S::zero(); rows * d];
    let mut dv = vec![S::zero(); rows * d];
    let mut dp = vec![S::zero(); n];
    for s in 0..seqs {
        let base = s * n;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &probs[((s * heads + h) * n + i) * n..][..n];
                let gi = &gd[(base + i) * d + off..][..dh];
                let mut dot = S::zero();
                for j in 0..n {
                    if !mask[base + j] {
                        dp[j] = S::zero();
                        continue;
                    }
                    let vj = &vv[(base + j) * d + off..][..dh];
                    let mut acc = S::zero();
                    for t in 0..dh {
                        acc += gi[t] * vj[t];
                    }
                    dp[j] = acc;
                    dot += acc * prow[j];
                    // dV_j += p_ij * g_i
                    let dvj = &mut dv[(base + j) * d + off..][..dh];
                    for t in 0..dh {
                        dvj[t] += prow[j] * gi[t];
                    }
                }
                for j in 0..n {
                    if !mask[base + j] {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[(base + i) * d + off + t] += ds * kv[(base + j) * d + off + t];
                        dk[(base + j) * d + off + t] += ds * qv[(base + i) * d + off + t];
                    }
                }
            }
        }
    }
    for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
        accumulate(
            nodes,
            grads,
            id,
            Tensor::new(nodes[id].value.shape().to_vec(), buf).unwrap(),
        );
    }
}
