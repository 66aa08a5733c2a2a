//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Var::backward`] walks the
//! record once in reverse and accumulates gradients into every node that
//! requires them; a leaf used several times receives the sum of all its
//! contributions.
//!
//! Shape contracts of the `Var` operations are programming invariants and
//! panic when broken. The fallible, user-facing entry points live in
//! [`crate::gemm`] and the model builders, which validate shapes up front.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gemm::{gemm, run_grouped, GemmGroup, Operand};
use crate::tensor::Tensor;

/// Smallest epsilon used by layer normalization.
pub const MIN_NORM_EPS: f64 = 1e-12;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Tokenwise(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    SumAxis { x: usize, axis: usize },
    Sum(usize),
    Square(usize),
    Sigmoid(usize),
    Swish(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    Softmax(usize),
    MaskedSoftmax(usize),
    LogSumExp(usize),
    Gather { x: usize, idx: Rc<Vec<usize>> },
    Scatter { x: usize, idx: Rc<Vec<usize>> },
    BceWithLogits { logits: usize, labels: Rc<Vec<f64>> },
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
    product_flops: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major strides of a shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into a new buffer laid out as `perm` of its axes.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; shape.len()];
    for o in out.iter_mut() {
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            flat += i * in_strides[perm[d]];
        }
        *o = src[flat];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `(outer, axis, inner)` sizes around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Groups for `x[B,T,D] · w[T,D,R] -> y[B,T,R]`, one group per token.
fn tokenwise_groups(b: usize, t: usize, d: usize, r: usize) -> Vec<GemmGroup> {
    (0..t)
        .map(|tok| GemmGroup {
            m: b,
            k: d,
            n: r,
            a_off: tok * d,
            a_rs: t * d,
            a_cs: 1,
            b_off: tok * d * r,
            b_rs: r,
            b_cs: 1,
            c_off: tok * r,
            c_rs: t * r,
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), flops: Cell::new(0), product_flops: Cell::new(0) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations performed by the forward ops recorded so far.
    ///
    /// Products count `2·m·n·p`; other arithmetic counts one per output
    /// element (scatter: one per source element); data movement counts zero.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// The share of [`Tape::flops`] spent in matrix products.
    pub fn product_flops(&self) -> u64 {
        self.product_flops.get()
    }

    fn tally_product(&self, n: usize) {
        self.product_flops.set(self.product_flops.get() + n as u64);
        self.tally(n);
    }

    fn tally(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a tensor; gradients are tracked iff the tensor requires them.
    pub fn var(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    fn info(&self, id: usize) -> (Vec<usize>, Rc<Vec<f64>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.shape.clone(), Rc::clone(&n.value), n.requires_grad)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Shared handle to the node's data.
    pub fn data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        let (shape, data, _) = self.tape.info(self.id);
        Tensor::new(shape, data.as_ref().clone()).expect("node shape is consistent")
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on a var with {} elements", data.len());
        data[0]
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, x, rg) = self.tape.info(self.id);
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        self.tape.tally(out.len());
        self.tape.push(shape, out, op, rg)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64, name: &str) -> Var<'t> {
        let (sa, a, ra) = self.tape.info(self.id);
        let (sb, b, rb) = self.tape.info(other.id);
        assert_eq!(sa, sb, "{name}: shape mismatch {sa:?} vs {sb:?}");
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.tally(out.len());
        self.tape.push(sa, out, op, ra || rb)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b, "div")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self) -> Var<'t> {
        self.unary(Op::Swish(self.id), |v| v * sigmoid(v))
    }

    fn row_broadcast(&self, row: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64, name: &str) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let (sr, r, rr) = self.tape.info(row.id);
        let d = *sx.last().unwrap();
        assert_eq!(sr, vec![d], "{name}: row shape {sr:?} does not match last axis of {sx:?}");
        let out: Vec<f64> = x.iter().enumerate().map(|(i, &v)| f(v, r[i % d])).collect();
        self.tape.tally(out.len());
        self.tape.push(sx, out, op, rx || rr)
    }

    /// Adds a `[D]` vector to every row of a `[..., D]` tensor.
    pub fn add_row(&self, bias: &Var<'t>) -> Var<'t> {
        self.row_broadcast(bias, Op::AddRow(self.id, bias.id), |a, b| a + b, "add_row")
    }

    /// Multiplies every row of a `[..., D]` tensor by a `[D]` vector.
    pub fn mul_row(&self, gain: &Var<'t>) -> Var<'t> {
        self.row_broadcast(gain, Op::MulRow(self.id, gain.id), |a, b| a * b, "mul_row")
    }

    /// Multiplies row `i` of a `[..., D]` tensor by `s[i]`.
    pub fn scale_rows(&self, s: &Var<'t>) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let (_, sv, rs) = self.tape.info(s.id);
        let d = *sx.last().unwrap();
        assert_eq!(sv.len() * d, x.len(), "scale_rows: {} scales for {:?}", sv.len(), sx);
        let out: Vec<f64> = x.iter().enumerate().map(|(i, &v)| v * sv[i / d]).collect();
        self.tape.tally(out.len());
        self.tape.push(sx, out, Op::ScaleRows(self.id, s.id), rx || rs)
    }

    /// 2-D product `[m, n] · [n, p]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (sa, a, ra) = self.tape.info(self.id);
        let (sb, b, rb) = self.tape.info(other.id);
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} · {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Operand::row_major(&a, 0, k), Operand::row_major(&b, 0, n), &mut out, 0, n, false);
        self.tape.tally_product(2 * m * k * n);
        self.tape.push(vec![m, n], out, Op::MatMul(self.id, other.id), ra || rb)
    }

    /// Applies a distinct `[D, R]` matrix to every token: `[B,T,D] · [T,D,R] -> [B,T,R]`.
    ///
    /// All `T` products run as one grouped dispatch.
    pub fn tokenwise_matmul(&self, weights: &Var<'t>) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let (sw, w, rw) = self.tape.info(weights.id);
        assert!(
            sx.len() == 3 && sw.len() == 3 && sx[1] == sw[0] && sx[2] == sw[1],
            "tokenwise_matmul: {sx:?} · {sw:?}"
        );
        let (b, t, d, r) = (sx[0], sx[1], sx[2], sw[2]);
        let mut out = vec![0.0; b * t * r];
        run_grouped(&tokenwise_groups(b, t, d, r), &x, &w, &mut out, false);
        self.tape.tally_product(2 * b * t * d * r);
        self.tape.push(vec![b, t, r], out, Op::Tokenwise(self.id, weights.id), rx || rw)
    }

    /// Batched product `[N,m,k] · [N,k,n]`, or `[N,m,k] · [N,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: &Var<'t>, trans_b: bool) -> Var<'t> {
        let (sa, a, ra) = self.tape.info(self.id);
        let (sb, b, rb) = self.tape.info(other.id);
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {sa:?} · {sb:?}");
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm inner dims: {sa:?} · {sb:?} (trans_b={trans_b})");
        let groups: Vec<GemmGroup> = (0..nb)
            .map(|i| GemmGroup {
                m,
                k,
                n,
                a_off: i * m * k,
                a_rs: k,
                a_cs: 1,
                b_off: i * k * n,
                b_rs: if trans_b { 1 } else { n },
                b_cs: if trans_b { k } else { 1 },
                c_off: i * m * n,
                c_rs: n,
            })
            .collect();
        let mut out = vec![0.0; nb * m * n];
        run_grouped(&groups, &a, &b, &mut out, false);
        self.tape.tally_product(2 * nb * m * k * n);
        self.tape
            .push(vec![nb, m, n], out, Op::BatchMatMul { a: self.id, b: other.id, trans_b }, ra || rb)
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        assert_eq!(numel(&sx), numel(shape), "reshape {sx:?} -> {shape:?}");
        let mut nodes = self.tape.nodes.borrow_mut();
        nodes.push(Node { shape: shape.to_vec(), value: x, op: Op::Reshape(self.id), requires_grad: rx });
        Var { tape: self.tape, id: nodes.len() - 1 }
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        assert_eq!(perm.len(), sx.len(), "permute rank");
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_data(&x, &sx, perm);
        self.tape.push(out_shape, out, Op::Permute { x: self.id, perm: perm.to_vec() }, rx)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let infos: Vec<_> = parts.iter().map(|p| tape.info(p.id)).collect();
        let base = &infos[0].0;
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for (s, _, _) in &infos {
            assert!(
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat: incompatible shapes {s:?} and {base:?} on axis {axis}"
            );
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (s, v, _) in &infos {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = infos.iter().any(|(_, _, r)| *r);
        tape.push(out_shape, out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        assert!(start + len <= sx[axis] && len > 0, "slice {start}+{len} of axis {axis} in {sx:?}");
        let (outer, size, inner) = split_at_axis(&sx, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = sx.clone();
        shape[axis] = len;
        self.tape.push(shape, out, Op::Slice { x: self.id, axis, start }, rx)
    }

    /// Sums out `axis` (the axis is removed; a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let (outer, size, inner) = split_at_axis(&sx, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..size {
                let base = (o * size + s) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape.tally(x.len());
        self.tape.push(shape, out, Op::SumAxis { x: self.id, axis }, rx)
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let (_, x, rx) = self.tape.info(self.id);
        let s = x.iter().sum();
        self.tape.tally(x.len());
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), rx)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = numel(&self.shape());
        self.sum().scale(1.0 / n as f64)
    }

    /// Layer normalization over the last axis followed by an affine map.
    ///
    /// `eps` is floored at [`MIN_NORM_EPS`].
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let (sg, g, rg) = self.tape.info(gain.id);
        let (sb, b, rb) = self.tape.info(bias.id);
        let d = *sx.last().unwrap();
        assert!(sg == [d] && sb == [d], "layer_norm: gain {sg:?}, bias {sb:?} for {sx:?}");
        let eps = eps.max(MIN_NORM_EPS);
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.tape.tally(out.len());
        self.tape.push(
            sx,
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
            rx || rg || rb,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let d = *sx.last().unwrap();
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            softmax_into(src, dst, |_| true);
        }
        self.tape.tally(out.len());
        self.tape.push(sx, out, Op::Softmax(self.id), rx)
    }

    /// Softmax over the last axis restricted to entries where `mask` is set;
    /// masked-out entries are exactly zero.
    pub fn masked_softmax(&self, mask: &[bool]) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        assert_eq!(mask.len(), x.len(), "masked_softmax mask size");
        let d = *sx.last().unwrap();
        let mut out = vec![0.0; x.len()];
        for (r, (src, dst)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            softmax_into(src, dst, |j| mask[r * d + j]);
        }
        self.tape.tally(out.len());
        self.tape.push(sx, out, Op::MaskedSoftmax(self.id), rx)
    }

    /// Numerically stable `ln Σ exp` over the last axis (axis removed).
    pub fn logsumexp(&self) -> Var<'t> {
        let (sx, x, rx) = self.tape.info(self.id);
        let d = *sx.last().unwrap();
        let out: Vec<f64> = x.chunks(d).map(logsumexp).collect();
        let mut shape = sx[..sx.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape.tally(x.len());
        self.tape.push(shape, out, Op::LogSumExp(self.id), rx)
    }

    /// Picks elements by flat index into an output of `shape`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let (_, x, rx) = self.tape.info(self.id);
        assert_eq!(numel(shape), idx.len(), "gather output shape");
        let out: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        self.tape.push(shape.to_vec(), out, Op::Gather { x: self.id, idx }, rx)
    }

    /// Whole rows of a `[N, D]` tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Var<'t> {
        let sx = self.shape();
        let d = *sx.last().unwrap();
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(Rc::new(idx), &[rows.len(), d])
    }

    /// Adjoint of [`Var::gather`]: adds element `i` into flat slot `idx[i]`
    /// of a zero tensor of `shape`.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let (_, x, rx) = self.tape.info(self.id);
        assert_eq!(x.len(), idx.len(), "scatter_add index count");
        let mut out = vec![0.0; numel(shape)];
        for (&i, &v) in idx.iter().zip(x.iter()) {
            out[i] += v;
        }
        self.tape.tally(x.len());
        self.tape.push(shape.to_vec(), out, Op::Scatter { x: self.id, idx }, rx)
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `labels`.
    pub fn bce_with_logits(&self, labels: &[f64]) -> Var<'t> {
        let (_, z, rz) = self.tape.info(self.id);
        assert_eq!(z.len(), labels.len(), "bce_with_logits: label count");
        let n = z.len() as f64;
        let loss = z.iter().zip(labels).map(|(&zi, &y)| softplus(zi) - y * zi).sum::<f64>() / n;
        self.tape.tally(z.len());
        self.tape.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits { logits: self.id, labels: Rc::new(labels.to_vec()) },
            rz,
        )
    }

    /// Gradients of this scalar with respect to every node that requires them.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[self.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64], keep: impl Fn(usize) -> bool) {
    let max = src
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        dst.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
        *d = if keep(j) { (s - max).exp() } else { 0.0 };
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Stable log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g.iter().copied()));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g.iter().copied()));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g.iter().map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |ga| add_into(ga, g.iter().zip(vb.iter()).map(|(g, b)| g * b)));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g.iter().zip(va.iter()).map(|(g, a)| g * a)));
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |ga| add_into(ga, g.iter().zip(vb.iter()).map(|(g, b)| g / b)));
            accumulate(grads, nodes, *b, |gb| {
                add_into(gb, g.iter().zip(va.iter().zip(vb.iter())).map(|(g, (a, b))| -g * a / (b * b)))
            });
        }
        Op::AddRow(x, r) => {
            let d = nodes[*r].value.len();
            accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().copied()));
            accumulate(grads, nodes, *r, |gr| {
                for (i, v) in g.iter().enumerate() {
                    gr[i % d] += v;
                }
            });
        }
        Op::MulRow(x, r) => {
            let (vx, vr) = (&nodes[*x].value, &nodes[*r].value);
            let d = vr.len();
            accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().enumerate().map(|(i, v)| v * vr[i % d])));
            accumulate(grads, nodes, *r, |gr| {
                for (i, v) in g.iter().enumerate() {
                    gr[i % d] += v * vx[i];
                }
            });
        }
        Op::ScaleRows(x, s) => {
            let (vx, vs) = (&nodes[*x].value, &nodes[*s].value);
            let d = vx.len() / vs.len();
            accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().enumerate().map(|(i, v)| v * vs[i / d])));
            accumulate(grads, nodes, *s, |gs| {
                for (i, v) in g.iter().enumerate() {
                    gs[i / d] += v * vx[i];
                }
            });
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().map(|v| v * c))),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().copied())),
        Op::MatMul(a, b) => {
            let (sa, va) = (&nodes[*a].shape, &nodes[*a].value);
            let vb = &nodes[*b].value;
            let (m, k, n) = (sa[0], sa[1], node.shape[1]);
            // dA = G · Bᵀ, dB = Aᵀ · G
            accumulate(grads, nodes, *a, |ga| {
                gemm(m, n, k, Operand::row_major(g, 0, n), Operand::transposed(vb, 0, n), ga, 0, k, true)
            });
            accumulate(grads, nodes, *b, |gb| {
                gemm(k, m, n, Operand::transposed(va, 0, k), Operand::row_major(g, 0, n), gb, 0, n, true)
            });
        }
        Op::Tokenwise(x, w) => {
            let (sx, vx) = (&nodes[*x].shape, &nodes[*x].value);
            let vw = &nodes[*w].value;
            let (b, t, d) = (sx[0], sx[1], sx[2]);
            let r = node.shape[2];
            accumulate(grads, nodes, *x, |gx| {
                // gx[:, tok, :] += g[:, tok, :] · w[tok]ᵀ
                let groups: Vec<GemmGroup> = (0..t)
                    .map(|tok| GemmGroup {
                        m: b,
                        k: r,
                        n: d,
                        a_off: tok * r,
                        a_rs: t * r,
                        a_cs: 1,
                        b_off: tok * d * r,
                        b_rs: 1,
                        b_cs: r,
                        c_off: tok * d,
                        c_rs: t * d,
                    })
                    .collect();
                run_grouped(&groups, g, vw, gx, true);
            });
            accumulate(grads, nodes, *w, |gw| {
                // gw[tok] += x[:, tok, :]ᵀ · g[:, tok, :]
                let groups: Vec<GemmGroup> = (0..t)
                    .map(|tok| GemmGroup {
                        m: d,
                        k: b,
                        n: r,
                        a_off: tok * d,
                        a_rs: 1,
                        a_cs: t * d,
                        b_off: tok * r,
                        b_rs: t * r,
                        b_cs: 1,
                        c_off: tok * d * r,
                        c_rs: r,
                    })
                    .collect();
                run_grouped(&groups, vx, g, gw, true);
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (sa, va) = (&nodes[*a].shape, &nodes[*a].value);
            let vb = &nodes[*b].value;
            let (nb, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.shape[2];
            let trans_b = *trans_b;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..nb {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let bop = if trans_b {
                        Operand::row_major(vb, i * n * k, k)
                    } else {
                        Operand::transposed(vb, i * k * n, n)
                    };
                    gemm(m, n, k, Operand::row_major(g, i * m * n, n), bop, ga, i * m * k, k, true);
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..nb {
                    if trans_b {
                        // dB = Gᵀ · A, shape n × k
                        gemm(n, m, k, Operand::transposed(g, i * m * n, n), Operand::row_major(va, i * m * k, k), gb, i * n * k, k, true);
                    } else {
                        // dB = Aᵀ · G, shape k × n
                        gemm(k, m, n, Operand::transposed(va, i * m * k, k), Operand::row_major(g, i * m * n, n), gb, i * k * n, n, true);
                    }
                }
            });
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = permute_data(g, &node.shape, &inverse);
            accumulate(grads, nodes, *x, |gx| add_into(gx, back.into_iter()));
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_at_axis(&node.shape, *axis);
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p].shape[*axis] * inner;
                accumulate(grads, nodes, p, |gp| {
                    for o in 0..outer {
                        add_into(&mut gp[o * chunk..(o + 1) * chunk], g[o * total + offset..o * total + offset + chunk].iter().copied());
                    }
                });
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let sx = &nodes[*x].shape;
            let (outer, size, inner) = split_at_axis(sx, *axis);
            let len = node.shape[*axis];
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let base = o * size * inner + start * inner;
                    add_into(&mut gx[base..base + len * inner], g[o * len * inner..(o + 1) * len * inner].iter().copied());
                }
            });
        }
        Op::SumAxis { x, axis } => {
            let (outer, size, inner) = split_at_axis(&nodes[*x].shape, *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for s in 0..size {
                        let base = (o * size + s) * inner;
                        add_into(&mut gx[base..base + inner], g[o * inner..(o + 1) * inner].iter().copied());
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
        Op::Square(x) => {
            let vx = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().zip(vx.iter()).map(|(g, x)| 2.0 * g * x)));
        }
        Op::Sigmoid(x) => {
            accumulate(grads, nodes, *x, |gx| add_into(gx, g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y))));
        }
        Op::Swish(x) => {
            let vx = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                add_into(
                    gx,
                    g.iter().zip(vx.iter()).map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    }),
                )
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let vg = &nodes[*gain].value;
            let d = vg.len();
            accumulate(grads, nodes, *bias, |gb| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
            });
            accumulate(grads, nodes, *gain, |gg| {
                for (i, v) in g.iter().enumerate() {
                    gg[i % d] += v * xhat[i];
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                for (r, &is) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let gh: Vec<f64> = g[rows.clone()].iter().zip(vg.iter()).map(|(g, w)| g * w).collect();
                    let h = &xhat[rows.clone()];
                    let mean_g = gh.iter().sum::<f64>() / d as f64;
                    let mean_gh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, out) in gx[rows].iter_mut().enumerate() {
                        *out += is * (gh[j] - mean_g - h[j] * mean_gh);
                    }
                }
            });
        }
        Op::Softmax(x) | Op::MaskedSoftmax(x) => {
            let d = *node.shape.last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.len() / d {
                    let rows = r * d..(r + 1) * d;
                    let dot: f64 = g[rows.clone()].iter().zip(&y[rows.clone()]).map(|(a, b)| a * b).sum();
                    for j in rows {
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            });
        }
        Op::LogSumExp(x) => {
            let vx = &nodes[*x].value;
            let d = *nodes[*x].shape.last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for (r, &lse) in y.iter().enumerate() {
                    for j in r * d..(r + 1) * d {
                        gx[j] += g[r] * (vx[j] - lse).exp();
                    }
                }
            });
        }
        Op::Gather { x, idx } => {
            accumulate(grads, nodes, *x, |gx| {
                for (&i, v) in idx.iter().zip(g) {
                    gx[i] += v;
                }
            });
        }
        Op::Scatter { x, idx } => {
            accumulate(grads, nodes, *x, |gx| add_into(gx, idx.iter().map(|&i| g[i])));
        }
        Op::BceWithLogits { logits, labels } => {
            let z = &nodes[*logits].value;
            let n = z.len() as f64;
            accumulate(grads, nodes, *logits, |gz| {
                add_into(gz, z.iter().zip(labels.iter()).map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n))
            });
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it and
    /// requires gradients.
    pub fn get(&self, v: &Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        v.requires_grad().then(|| Tensor::new(v.shape(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but zero-filled when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    /// Raw gradient buffer for a node, if any.
    pub fn raw(&self, v: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let loss = x.mul(&x).sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]));
        assert!(matches!(x.square().backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn reused_leaf_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.5, -2.0]));
        let once = x.square().sum().backward().unwrap().get(&x).unwrap();
        let tape2 = Tape::new();
        let x2 = tape2.leaf(&t(&[2], &[1.5, -2.0]));
        let twice = x2.square().add(&x2.square()).sum().backward().unwrap().get(&x2).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 4], &[5.0; 4]));
        let g = tape.constant(&Tensor::full(&[4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[4]));
        assert_eq!(x.layer_norm(&g, &b, 1e-5).value().data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_normalized_row_is_fixed_point() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1.0, -1.0]));
        let g = tape.constant(&Tensor::full(&[2], 1.0));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = x.layer_norm(&g, &b, 0.0).value();
        assert!((y.data()[0] - 1.0).abs() < 1e-11 && (y.data()[1] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn layer_norm_single_feature_zero_eps_is_finite() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3, 1], &[2.0, -7.0, 0.0]));
        let g = tape.constant(&Tensor::full(&[1], 1.0));
        let b = tape.constant(&Tensor::zeros(&[1]));
        assert!(x.layer_norm(&g, &b, 0.0).value().is_finite());
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::new();
        let row: Vec<f64> = (0..16).map(|i| 10.0 * (((i * 7) % 5) as f64 * 0.3 - 1.1 + (i as f64).sin())).collect();
        let raw_mu = row.iter().sum::<f64>() / 16.0;
        let raw_var = row.iter().map(|v| (v - raw_mu).powi(2)).sum::<f64>() / 16.0;
        let x = tape.constant(&t(&[1, 16], &row));
        let g = tape.constant(&Tensor::full(&[16], 1.0));
        let b = tape.constant(&Tensor::zeros(&[16]));
        let y = x.layer_norm(&g, &b, 1e-5).value();
        let mu = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-10);
        assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sum_of_layer_norm_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 4], 2.5));
        let g = tape.constant(&Tensor::full(&[4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let grads = x.layer_norm(&g, &b, 1e-5).sum().backward().unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn reshape_shares_storage() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[2, 4], |i| i as f64));
        let y = x.reshape(&[1, 8]);
        assert!(Rc::ptr_eq(&x.data(), &y.data()));
        assert_eq!(tape.flops(), 0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 4], &[3.0, 1.0, 2.0, 0.0]));
        let y = x.masked_softmax(&[true, false, true, false]).value();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[3], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((logsumexp(&[10.0; 4]) - (10.0 + 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let y = x.permute(&[0, 2, 1, 3]).permute(&[0, 2, 1, 3]);
        assert_eq!(y.value(), x.value());
        let z = x.permute(&[0, 2, 1, 3]).value();
        assert_eq!(z.at(&[1, 3, 2, 4]), x.value().at(&[1, 2, 3, 4]));
    }
}
