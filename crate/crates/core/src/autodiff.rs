//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. Values are stored
//! on the tape; [`Var`] is a cheap handle into it. [`Tape::backward`] walks
//! the recorded operations once, in reverse, and returns the gradient of a
//! scalar loss with respect to every leaf that requires one.
//!
//! Most operations treat their inputs as matrices whose last axis is the
//! column axis. Gradients are only propagated into inputs that require them,
//! so frozen weights cost a single forward product.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{domain_err, shape_err, Error, Result};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Block layout for fused multi-head attention over packed sequences.
///
/// Rows of the packed `[n_seq * seq_len, width]` inputs are grouped into
/// `n_seq` independent sequences of `seq_len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Per-token key validity (`true` = attendable), length `n_seq * seq_len`.
    pub key_mask: Option<Vec<bool>>,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRows { x: Var, rows: Var },
    Scale { x: Var, factor: T },
    DivScalar { x: Var, s: Var },
    Gelu { x: Var, tanh: Vec<T> },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    RowSoftmax { x: Var, inv_temp: T },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<T> },
    GatherRows { src: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Transpose { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; `None` if the leaf does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    /// Moves the gradient of `var` into `tensor.grad`.
    ///
    /// Fails if `tensor` already holds a gradient that was never reset.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        if tensor.grad.is_some() {
            return Err(Error::State(
                "tensor already holds a gradient; call zero_grad before another backward".into(),
            ));
        }
        let g = self
            .leaves
            .get(&var)
            .ok_or_else(|| Error::State(format!("{var:?} is not a gradient-carrying leaf")))?;
        if g.shape() != tensor.shape() {
            return Err(shape_err!("gradient {:?} vs tensor {:?}", g.shape(), tensor.shape()));
        }
        tensor.grad = Some(g.data().to_vec());
        Ok(())
    }
}

fn dims2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    t.matrix_dims()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !all_finite(&data) {
            let bad = data.iter().position(|x| !x.is_finite()).unwrap_or(0);
            return Err(Error::Numeric(format!(
                "non-finite value at element {bad} of {} output",
                op_name(&op)
            )));
        }
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a @ b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err!("matmul needs 2-D operands, got {:?} and {:?}", av.shape(), bv.shape()));
        }
        let (m, k) = dims2(av);
        let (n, k2, b_strides) = if transpose_b {
            let (n, k2) = dims2(bv);
            (n, k2, (1, k2))
        } else {
            let (k2, n) = dims2(bv);
            (n, k2, (n, 1))
        };
        if k != k2 {
            return Err(shape_err!(
                "matmul of {:?} by {:?}{}: inner dimensions disagree",
                av.shape(),
                bv.shape(),
                if transpose_b { "^T" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), (k, 1), bv.data(), b_strides, T::zero(), &mut out, (n, 1));
        self.push(&[m, n], out, Op::MatMul { a, b, transpose_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err!("add of {:?} and {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(&shape, out, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err!("mul of {:?} and {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(&shape, out, Op::Mul { a, b }, &[a, b])
    }

    /// Adds a `[p, n]` block (or an `[n]` vector) to every consecutive group of
    /// `p` rows of `x: [m, n]`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(rows));
        let (m, n) = dims2(xv);
        let (p, n2) = dims2(rv);
        if n != n2 || m % p != 0 {
            return Err(shape_err!("cannot broadcast {:?} over rows of {:?}", rv.shape(), xv.shape()));
        }
        let r = rv.data();
        let mut out = xv.data().to_vec();
        for (block, row) in out.chunks_mut(n).zip(r.chunks(n).cycle()) {
            block.iter_mut().zip(row).for_each(|(o, &b)| *o += b);
        }
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::AddRows { x, rows }, &[x, rows])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::Scale { x, factor }, &[x])
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err!("divisor must hold one element, got {:?}", sv.shape()));
        }
        let d = sv.data()[0];
        if d == T::zero() {
            return Err(domain_err!("division by zero scalar"));
        }
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v / d).collect();
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::DivScalar { x, s }, &[x, s])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = xv.data().iter().zip(&tanh).map(|(&v, &t)| T::of(0.5) * v * (T::one() + t)).collect();
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::Gelu { x, tanh }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::Relu { x }, &[x])
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length equal to the row width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = dims2(xv);
        if d == 0 {
            return Err(shape_err!("layer_norm over an empty axis"));
        }
        if gv.len() != d || bv.len() != d {
            return Err(shape_err!(
                "layer_norm width {d} vs gain {:?} / bias {:?}",
                gv.shape(),
                bv.shape()
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let mut out = Vec::with_capacity(m * d);
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                out.push((v - mean) * rstd * g + b);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }, &[x, gain, bias])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(domain_err!("dropout probability {p} outside [0, 1)"));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn row_softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(domain_err!("softmax temperature must be positive, got {temperature}"));
        }
        let inv_temp = T::one() / temperature;
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row, inv_temp, None);
        }
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::RowSoftmax { x, inv_temp }, &[x])
    }

    /// Fused multi-head scaled dot-product attention over packed sequences.
    ///
    /// Each head attends with `softmax(q_h k_h^T / sqrt(d_h)) v_h`; heads are
    /// written back side by side, so the output has the width of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = dims2(qv);
        let AttentionLayout { n_seq, seq_len: s, heads, .. } = layout;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err!(
                "attention inputs disagree: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("width {d} is not divisible by {heads} heads"));
        }
        if n_seq * s != rows {
            return Err(shape_err!("{rows} rows cannot hold {n_seq} sequences of length {s}"));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != rows {
                return Err(shape_err!("key mask of length {} for {rows} rows", mask.len()));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); n_seq * heads * s * s];
        for seq in 0..n_seq {
            let mask = layout.key_mask.as_ref().map(|m| &m[seq * s..(seq + 1) * s]);
            for h in 0..heads {
                let off = seq * s * d + h * dh;
                let p = &mut probs[(seq * heads + h) * s * s..][..s * s];
                T::gemm(s, dh, s, scale, &qv.data()[off..], (d, 1), &kv.data()[off..], (1, d), T::zero(), p, (s, 1));
                for row in p.chunks_mut(s) {
                    softmax_in_place(row, T::one(), mask);
                }
                T::gemm(s, s, dh, T::one(), p, (s, 1), &vv.data()[off..], (d, 1), T::zero(), &mut out[off..], (d, 1));
            }
        }
        let shape = qv.shape().to_vec();
        self.push(&shape, out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Selects rows of `src` by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, n) = dims2(sv);
        if ids.is_empty() {
            return Err(shape_err!("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= r {
                return Err(Error::Input(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&sv.data()[i * n..(i + 1) * n]);
        }
        self.push(&[ids.len(), n], out, Op::GatherRows { src, ids: ids.to_vec() }, &[src])
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero parts"))?;
        let (_, n) = dims2(self.value(*first));
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if dims2(pv).1 != n {
                return Err(shape_err!("concat of width {n} with {:?}", pv.shape()));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / n;
        self.push(&[rows, n], out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose();
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Transpose { x }, &[x])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::new();
        for row in xv.data().chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(domain_err!("cannot normalize a zero row"));
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let shape = xv.shape().to_vec();
        self.push(&shape, out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, k) = dims2(lv);
        if targets.len() != m {
            return Err(shape_err!("{} targets for {m} logit rows", targets.len()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            if t >= k {
                return Err(Error::Input(format!("target class {t} out of range for {k} classes")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::of(m as f64);
        self.push(&[1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(&[1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        self.push(&[1], vec![s], Op::Mean { x }, &[x])
    }

    /// Back-propagates from a single-element `loss`.
    ///
    /// Each recorded operation is visited at most once, in reverse order. A
    /// tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!("loss must be a scalar, got shape {:?}", self.value(loss).shape()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // leaves recorded after the loss never influenced it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.value.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].value.requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].value.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(buf);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = dims2(av);
                let n = dims2(out).1;
                if needs(*a) {
                    acc(*a, &mut |da| {
                        let b_strides = if *transpose_b { (k, 1) } else { (1, n) };
                        T::gemm(m, n, k, T::one(), g, (n, 1), bv.data(), b_strides, T::one(), da, (k, 1));
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |db| {
                        if *transpose_b {
                            T::gemm(n, m, k, T::one(), g, (1, n), av.data(), (k, 1), T::one(), db, (k, 1));
                        } else {
                            T::gemm(k, m, n, T::one(), av.data(), (1, k), g, (n, 1), T::one(), db, (n, 1));
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |d| add_assign(d, g));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddRows { x, rows } => {
                acc(*x, &mut |dx| add_assign(dx, g));
                let (p, n) = dims2(val(*rows));
                acc(*rows, &mut |dr| {
                    for (r, grow) in g.chunks(n).enumerate() {
                        add_assign(&mut dr[(r % p) * n..(r % p + 1) * n], grow);
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                });
            }
            Op::DivScalar { x, s } => {
                let d = val(*s).data()[0];
                acc(*x, &mut |dx| {
                    for (dxi, &gi) in dx.iter_mut().zip(g) {
                        *dxi += gi / d;
                    }
                });
                acc(*s, &mut |ds| {
                    let dot: T = g.iter().zip(out.data()).map(|(&gi, &yi)| gi * yi).sum();
                    ds[0] -= dot / d;
                });
            }
            Op::Gelu { x, tanh } => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for (((d, &gi), &xi), &t) in dx.iter_mut().zip(g).zip(xv.data()).zip(tanh) {
                        *d += gi * gelu_slope(xi, t);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let (_, d) = dims2(xv);
                let dn = T::of(d as f64);
                let xhat = |r: usize, j: usize| (xv.data()[r * d + j] - mean[r]) * rstd[r];
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for r in 0..mean.len() {
                            let grow = &g[r * d..(r + 1) * d];
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for j in 0..d {
                                let dxh = grow[j] * gv[j];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat(r, j);
                            }
                            let (m1, m2) = (sum_dxhat / dn, sum_dxhat_xhat / dn);
                            for j in 0..d {
                                let dxh = grow[j] * gv[j];
                                dx[r * d + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                            }
                        }
                    });
                }
                acc(*gain, &mut |dg| {
                    for r in 0..mean.len() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(d) {
                        add_assign(db, grow);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |dx| {
                    for ((d, &gi), &k) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * k;
                    }
                });
            }
            Op::RowSoftmax { x, inv_temp } => {
                let (_, n) = dims2(out);
                acc(*x, &mut |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *inv_temp * yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (rows, d) = dims2(qv);
                let (s, heads) = (layout.seq_len, layout.heads);
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); s * s];
                for seq in 0..layout.n_seq {
                    for h in 0..heads {
                        let off = seq * s * d + h * dh;
                        let p = &probs[(seq * heads + h) * s * s..][..s * s];
                        T::gemm(s, s, dh, T::one(), p, (1, s), &g[off..], (d, 1), T::one(), &mut dv[off..], (d, 1));
                        T::gemm(s, dh, s, T::one(), &g[off..], (d, 1), &vv.data()[off..], (1, d), T::zero(), &mut dp, (s, 1));
                        for (prow, dprow) in p.chunks(s).zip(dp.chunks_mut(s)) {
                            let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dpi, &pi) in dprow.iter_mut().zip(prow) {
                                *dpi = pi * (*dpi - dot);
                            }
                        }
                        T::gemm(s, s, dh, scale, &dp, (s, 1), &kv.data()[off..], (d, 1), T::one(), &mut dq[off..], (d, 1));
                        T::gemm(s, s, dh, scale, &dp, (1, s), &qv.data()[off..], (d, 1), T::one(), &mut dk[off..], (d, 1));
                    }
                }
                acc(*q, &mut |b| add_assign(b, &dq));
                acc(*k, &mut |b| add_assign(b, &dk));
                acc(*v, &mut |b| add_assign(b, &dv));
            }
            Op::GatherRows { src, ids } => {
                let n = dims2(out).1;
                acc(*src, &mut |ds| {
                    for (grow, &id) in g.chunks(n).zip(ids) {
                        add_assign(&mut ds[id * n..(id + 1) * n], grow);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |dp| add_assign(dp, &g[start..start + len]));
                    start += len;
                }
            }
            Op::Transpose { x } => {
                let (m, n) = dims2(val(*x));
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let n = dims2(out).1;
                acc(*x, &mut |dx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: T = grow.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += (grow[j] - y[j] * dot) / *norm;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = dims2(val(*logits)).1;
                let w = g[0] / T::of(targets.len() as f64);
                acc(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * k + j] += w * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean { x } => {
                let w = g[0] / T::of(val(*x).len() as f64);
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += w));
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::AddRows { .. } => "add_rows",
        Op::Scale { .. } => "scale",
        Op::DivScalar { .. } => "div_scalar",
        Op::Gelu { .. } => "gelu",
        Op::Relu { .. } => "relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::RowSoftmax { .. } => "row_softmax",
        Op::Attention { .. } => "attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Transpose { .. } => "transpose",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stable softmax of `row * scale`; masked-out entries get probability zero.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T, mask: Option<&[bool]>) {
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, v) in row.iter_mut().enumerate() {
        *v = *v * scale;
        if valid(j) && *v > max {
            max = *v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if valid(j) { (*v - max).exp() } else { T::zero() };
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

/// `x - x` is zero for finite values and NaN otherwise; eight lanes vectorize.
fn all_finite<T: Scalar>(data: &[T]) -> bool {
    let mut lanes = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l += x - x;
        }
    }
    lanes.iter().chain(tail).all(|x| x.is_finite())
}

/// `tanh(k (x + c x^3))` through a single `exp`; saturates cleanly at both ends.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_slope<T: Scalar>(x: T, t: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

#[cfg(test)]
fn gelu_value<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_tanh(x))
}

#[cfg(test)]
fn gelu_derivative<T: Scalar>(x: T) -> T {
    gelu_slope(x, gelu_tanh(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for t in 0..4 {
                    expected[i * 2 + j] += a.get(&[i, t]) * b.get(&[t, j]);
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = tape.constant(b.transpose());
        let c2 = tape.matmul_nt(av, bt).unwrap();
        assert!(tape.value(c2).max_abs_diff(tape.value(c)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.starts_with("shape error"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 2], &[0.0, 0.0, 3f64.ln(), 0.0]));
        let y = tape.row_softmax(x, 1.0).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
        assert!((y[2] - 0.75).abs() < 1e-15 && (y[3] - 0.25).abs() < 1e-15);
        assert!(matches!(tape.row_softmax(x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(tape.row_softmax(x, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap());
        let y = tape.row_softmax(x, 0.01).unwrap();
        assert!(tape.value(y).all_finite());
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(t64(&[3], &[1.0; 3]));
        let zeros = tape.constant(t64(&[3], &[0.0; 3]));
        let x = tape.constant(t64(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, ones, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g2 = tape.constant(t64(&[2], &[1.0, 1.0]));
        let b2 = tape.constant(t64(&[2], &[0.0, 0.0]));
        let x = tape.constant(t64(&[1, 2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, g2, b2).unwrap();
        // variance 1, so the output is +-1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-15);

        let zero_gain = tape.constant(t64(&[3], &[0.0; 3]));
        let bias = tape.constant(t64(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t64(&[2, 3], &[1.0, 5.0, -3.0, 0.2, 0.1, 9.0]));
        let y = tape.layer_norm(x, zero_gain, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let x = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(tape.layer_norm(x, ones, zeros), Err(Error::Shape(_))));
    }

    #[test]
    fn gelu_values_and_gradient() {
        assert_eq!(gelu_value(0.0f64), 0.0);
        assert!((gelu_value(10.0f64) - 10.0).abs() < 1e-6);
        let h = 1e-5;
        let fd = (gelu_value(0.5 + h) - gelu_value(0.5 - h)) / (2.0 * h);
        assert!((gelu_derivative(0.5f64) - fd).abs() < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[4, 4], 2.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::filled(&[1000, 1000], 1.0));
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let data = tape.value(y).data();
        let zeros = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
        assert!((zeros - 0.25).abs() < 0.005, "zero fraction {zeros}");
        let keep = 1.0 / 0.75f32;
        assert!(data.iter().all(|&v| v == 0.0 || v == keep));
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::filled(&[64], 1.0));
            let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
            tape.value(y).clone()
        };
        assert!(run(3).bit_eq(&run(3)));
        assert!(!run(3).bit_eq(&run(4)));
    }

    #[test]
    fn backward_outer_product_and_contract() {
        let mut tape = Tape::new();
        let w = tape.leaf(t64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).trainable());
        let unused = tape.leaf(t64(&[2], &[1.0, 2.0]).trainable());
        let frozen = tape.constant(t64(&[2], &[1.0, 1.0]));
        let x = tape.constant(t64(&[3, 1], &[1.0, 2.0, 3.0]));
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d sum(Wx) / dW[i][j] = x[j]
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(grads.get(unused).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(grads.get(frozen).is_none());
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0]).trainable());
        assert!(matches!(tape.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    fn writing_gradient_twice_without_reset_fails() {
        let mut target = t64(&[1], &[3.0]).trainable();
        for attempt in 0..2 {
            let mut tape = Tape::new();
            let w = tape.leaf(target.clone());
            let y = tape.scale(w, 2.0).unwrap();
            let loss = tape.sum(y).unwrap();
            let grads = tape.backward(loss).unwrap();
            let res = grads.write_into(w, &mut target);
            if attempt == 0 {
                res.unwrap();
                assert_eq!(target.grad.as_deref(), Some(&[2.0][..]));
            } else {
                assert!(matches!(res, Err(Error::State(_))));
            }
        }
        target.zero_grad();
        assert!(target.grad.is_none());
    }

    #[test]
    fn attention_single_token_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 4], &mut rng));
        let k = tape.constant(random(&[1, 4], &mut rng));
        let v = tape.constant(random(&[1, 4], &mut rng));
        let layout = AttentionLayout { n_seq: 1, seq_len: 1, heads: 2, key_mask: None };
        let o = tape.attention(q, k, v, layout).unwrap();
        assert!(tape.value(o).bit_eq(tape.value(v)));
    }

    #[test]
    fn masked_keys_receive_no_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let q = tape.constant(random(&[3, 4], &mut rng));
        let k = tape.constant(random(&[3, 4], &mut rng));
        let mut vals = random(&[3, 4], &mut rng);
        let layout = AttentionLayout { n_seq: 1, seq_len: 3, heads: 2, key_mask: Some(vec![true, true, false]) };
        let v = tape.constant(vals.clone());
        let o1 = tape.attention(q, k, v, layout.clone()).unwrap();
        for x in &mut vals.data_mut()[8..] {
            *x = 100.0;
        }
        let v2 = tape.constant(vals);
        let o2 = tape.attention(q, k, v2, layout).unwrap();
        assert!(tape.value(o1).bit_eq(tape.value(o2)));
    }
}
