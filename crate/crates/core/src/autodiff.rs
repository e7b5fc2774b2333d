//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward operation appends a node to a [`Tape`]; nodes are only ever
//! appended, so the tape order is a topological order of the computation.
//! [`Tape::backward`] walks the tape once in reverse, accumulating
//! vector-Jacobian products into each input.
//!
//! Broadcasting in binary operations is restricted to two forms:
//!
//! * **leading**: the right operand's shape is a suffix of the left's
//!   (`[B, T, D] + [D]`, a bias repeated over leading axes);
//! * **trailing**: the right operand has the left's rank with trailing axes
//!   of size one (`[B, T, N] - [B, T, 1]`, a per-row statistic repeated along
//!   the row).
//!
//! Everything else is a dimension error.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{gelu_derivative_scalar, gelu_scalar};
use crate::tensor::{strides_of, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sqrt,
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Leading,
    Trailing { inner: usize },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() < a.len() && a.ends_with(b) {
            return Ok(Broadcast::Leading);
        }
        if b.len() == a.len() {
            let k = a.iter().zip(b).take_while(|(x, y)| x == y).count();
            if b[k..].iter().all(|&d| d == 1) {
                return Ok(Broadcast::Trailing {
                    inner: a[k..].iter().product(),
                });
            }
        }
        Err(Error::dim(format!("cannot broadcast {b:?} onto {a:?}")))
    }

    #[inline]
    fn rhs_index(self, i: usize, rhs_len: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Leading => i % rhs_len,
            Broadcast::Trailing { inner } => i / inner,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Unary {
        op: UnaryOp,
        a: usize,
    },
    Reduce {
        op: ReduceOp,
        a: usize,
        len: usize,
        inner: usize,
        /// Flat input index of the selected element, max only.
        argmax: Vec<usize>,
    },
    Gather {
        a: usize,
        index: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Prelu {
        a: usize,
        slope: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a forward computation for later differentiation.
///
/// A tape and the [`Var`]s it hands out belong together: using a `Var` on
/// another tape is a contract error.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[self.index(v).ok()?].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("var from another tape")].requires_grad
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Contract(format!(
                "variable belongs to tape {} but was used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across every
    /// leading index of `a`) or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if k != kb || !(shared_rhs || lead_a == lead_b) {
            return Err(Error::dim(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            )));
        }
        let batch: usize = lead_a.iter().product();
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);

        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let bt = if shared_rhs { 0 } else { t };
            gemm(
                &da[t * m * k..(t + 1) * m * k],
                &db[bt * k * n..(bt + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[ia, ib]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let bcast = Broadcast::resolve(self.nodes[ia].value.shape(), self.nodes[ib].value.shape())?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (da, db) = (va.data(), vb.data());
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[bcast.rhs_index(i, db.len())]))
            .collect();
        let value = Tensor::new(va.shape(), out)?;
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(
            value,
            Op::Binary {
                op,
                a: ia,
                b: ib,
                bcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        match op {
            UnaryOp::Log => {
                if let Some(i) = va.data().iter().position(|&x| x <= 0.0) {
                    return Err(Error::Domain(format!(
                        "log of non-positive value {} at flat index {i}",
                        va.data()[i]
                    )));
                }
            }
            UnaryOp::Sqrt => {
                if let Some(i) = va.data().iter().position(|&x| x < 0.0) {
                    return Err(Error::Domain(format!(
                        "sqrt of negative value {} at flat index {i}",
                        va.data()[i]
                    )));
                }
            }
            _ => {}
        }
        let value = va.map(|x| match op {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Neg => -x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryOp::Gelu => gelu_scalar(x),
        });
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Unary { op, a: ia }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(c), a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, a)
    }

    /// Parametric ReLU with one slope per entry of the last axis (or a single shared slope).
    /// Zero inputs take the identity branch.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let (ia, is) = (self.index(a)?, self.index(slope)?);
        let (va, vs) = (&self.nodes[ia].value, &self.nodes[is].value);
        let channels = va.shape().last().copied().unwrap_or(1);
        let ok = vs.rank() == 1 && (vs.len() == channels || vs.len() == 1);
        if !ok {
            return Err(Error::dim(format!(
                "prelu slope {:?} does not match channel axis of {:?}",
                vs.shape(),
                va.shape()
            )));
        }
        let s = vs.data();
        let out = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if x >= 0.0 { x } else { s[i % s.len()] * x })
            .collect();
        let value = Tensor::new(va.shape(), out)?;
        let rg = self.any_grad(&[ia, is]);
        Ok(self.push(value, Op::Prelu { a: ia, slope: is }, rg))
    }

    /// Reduces one axis away. Max sends its gradient to the first (lowest index) maximum.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = va.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let slot = o * inner + j;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = 0.0;
                        for l in 0..len {
                            acc += data[base + l * inner];
                        }
                        out[slot] = if op == ReduceOp::Mean {
                            acc / len as f64
                        } else {
                            acc
                        };
                    }
                    ReduceOp::Max => {
                        let mut best = base;
                        for l in 1..len {
                            let idx = base + l * inner;
                            let (v, b) = (data[idx], data[best]);
                            if v > b || (v.is_nan() && !b.is_nan()) {
                                best = idx;
                            }
                        }
                        out[slot] = data[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(
            value,
            Op::Reduce {
                op,
                a: ia,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Max, a, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.nodes[ia].value.reshape(shape)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Reshape { a: ia }, rg))
    }

    /// `out[i] = a[index[i]]` with `out` shaped `shape`. The backward pass
    /// scatter-adds, so an index may repeat (that is how broadcasts and
    /// overlapping patches are expressed).
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let ia = self.index(a)?;
        let src = self.nodes[ia].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let value = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Gather { a: ia, index }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!(
                "{perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let in_strides = strides_of(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for axis in (0..counter.len()).rev() {
                counter[axis] += 1;
                if counter[axis] < out_shape[axis] {
                    break;
                }
                counter[axis] = 0;
            }
        }
        self.gather(a, &out_shape, index)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Computes `d loss / d leaf` for every leaf that requires a gradient.
    ///
    /// Gradients from earlier calls are discarded first. Each node is visited
    /// at most once, in reverse tape order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            propagate(&self.nodes, idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((idx, g));
            }
        }
        for (idx, g) in leaf_grads {
            let shape = self.nodes[idx].value.shape().to_vec();
            self.nodes[idx].grad = Some(Tensor::new(&shape, g)?);
        }
        Ok(())
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[idx].value.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let va = nodes[a].value.data();
            let vb = nodes[b].value.data();
            if let Some(ga) = slot(grads, nodes, a) {
                for t in 0..batch {
                    let bt = if shared_rhs { 0 } else { t };
                    gemm_bt(
                        &g[t * m * n..(t + 1) * m * n],
                        &vb[bt * k * n..(bt + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for t in 0..batch {
                    let bt = if shared_rhs { 0 } else { t };
                    gemm_at(
                        &va[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[bt * k * n..(bt + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Binary { op, a, b, bcast } => {
            let va = nodes[a].value.data();
            let vb = nodes[b].value.data();
            let nb = vb.len();
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, gi) in g.iter().enumerate() {
                    let y = vb[bcast.rhs_index(i, nb)];
                    ga[i] += match op {
                        BinaryOp::Add | BinaryOp::Sub => *gi,
                        BinaryOp::Mul => gi * y,
                        BinaryOp::Div => gi / y,
                    };
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, gi) in g.iter().enumerate() {
                    let j = bcast.rhs_index(i, nb);
                    gb[j] += match op {
                        BinaryOp::Add => *gi,
                        BinaryOp::Sub => -gi,
                        BinaryOp::Mul => gi * va[i],
                        BinaryOp::Div => -gi * va[i] / (vb[j] * vb[j]),
                    };
                }
            }
        }
        &Op::Unary { op, a } => {
            let va = nodes[a].value.data();
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i]
                        * match op {
                            UnaryOp::Exp => out[i],
                            UnaryOp::Log => 1.0 / va[i],
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Scale(c) => c,
                            UnaryOp::AddScalar(_) => 1.0,
                            UnaryOp::Sqrt => 0.5 / out[i],
                            UnaryOp::Relu => {
                                if va[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_derivative_scalar(va[i]),
                        };
                }
            }
        }
        Op::Reduce {
            op,
            a,
            len,
            inner,
            argmax,
        } => {
            let (len, inner) = (*len, *inner);
            if let Some(ga) = slot(grads, nodes, *a) {
                for (slot_idx, gi) in g.iter().enumerate() {
                    let (o, j) = (slot_idx / inner, slot_idx % inner);
                    let base = o * len * inner + j;
                    match op {
                        ReduceOp::Sum => {
                            for l in 0..len {
                                ga[base + l * inner] += gi;
                            }
                        }
                        ReduceOp::Mean => {
                            let share = gi / len as f64;
                            for l in 0..len {
                                ga[base + l * inner] += share;
                            }
                        }
                        ReduceOp::Max => ga[argmax[slot_idx]] += gi,
                    }
                }
            }
        }
        Op::Gather { a, index } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (gi, &src) in g.iter().zip(index) {
                    ga[src] += gi;
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for (acc, gi) in ga.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
        &Op::Prelu { a, slope } => {
            let va = nodes[a].value.data();
            let vs = nodes[slope].value.data();
            let ns = vs.len();
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += if va[i] >= 0.0 {
                        g[i]
                    } else {
                        vs[i % ns] * g[i]
                    };
                }
            }
            if let Some(gs) = slot(grads, nodes, slope) {
                for i in 0..g.len() {
                    if va[i] < 0.0 {
                        gs[i % ns] += va[i] * g[i];
                    }
                }
            }
        }
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`. The sum over `k` runs in
/// index order starting from the existing `out` value.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += g · bᵀ` for `g: m×n`, `b: k×n`, `out: m×k`.
fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, `out: k×n`.
fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - central| / (|central| + 1e-12)` over all coordinates.
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, over every coordinate of every input.
///
/// A non-finite function value or gradient is reported as an
/// [`Error::Instability`] naming the input and coordinate.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.len() {
            let x0 = input.data()[coord];
            work[which].data_mut()[coord] = x0 + h;
            let plus = eval(&work)?;
            work[which].data_mut()[coord] = x0 - h;
            let minus = eval(&work)?;
            work[which].data_mut()[coord] = x0;

            let central = (plus - minus) / (2.0 * h);
            let exact = analytic[which].data()[coord];
            if !central.is_finite() || !exact.is_finite() {
                return Err(Error::Instability(format!(
                    "non-finite value in gradient check at input {which}, coordinate {coord}"
                )));
            }
            let rel = (exact - central).abs() / (central.abs() + 1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (which, coord);
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`]; returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
        .map(|r| r.max_rel_err)
}
