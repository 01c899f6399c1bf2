//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Node
//! indices are creation order, so the tape is a DAG already sorted
//! topologically and `backward` simply walks it in reverse.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::activation::{sigmoid, GateActivation};
use super::float::gemm;
use super::kernels::{axis_split, inverse_axes, permute, softmax_into, softmax_rows, softmax_rows_backward};
use super::tensor::check_shape;
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    MeanLast(usize),
    VarLast(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, T),
    Sigmoid(usize),
    Act(usize, GateActivation),
    Softmax(usize),
    CausalSoftmax(usize, T),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T> },
    Embedding { table: usize, ids: Vec<usize> },
    Rope { x: usize, cos: Vec<T>, sin: Vec<T> },
    StopGradient(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanLast(..) => "mean_last",
            Op::VarLast(..) => "var_last",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Powf(..) => "powf",
            Op::Sigmoid(..) => "sigmoid",
            Op::Act(..) => "activation",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::Rope { .. } => "rope",
            Op::StopGradient(..) => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Embedding { table, .. } => vec![*table],
            Op::Rope { x, .. } => vec![*x],
            Op::Slice { input, .. } => vec![*input],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Transpose(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanLast(a)
            | Op::VarLast(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::Sigmoid(a)
            | Op::Act(a, _)
            | Op::Softmax(a)
            | Op::CausalSoftmax(a, _)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward recording. Not shared across threads.
pub struct Tape<T: Float> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if na == 1 && (nb > 1 || b.len() >= a.len()) {
        Ok(b.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

#[inline]
fn bcast<T: Copy>(x: &[T], i: usize) -> T {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
    }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape.last().copied().ok_or_else(|| Error::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: "rank 0".into(),
    })
}

/// Reduces a full-size gradient onto a broadcast operand of numel 1.
fn unbroadcast<T: Float>(g: Vec<T>, target_len: usize) -> Vec<T> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.borrow().len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf | Op::StopGradient(_) => false,
            _ => op.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        let index = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    /// Records an input tensor. Gradients are retained for leaves that
    /// require them.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        Ref::map(self.nodes.borrow(), |n| &n[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grad_ref(v).map(|g| g.clone())
    }

    pub fn grad_ref(&self, v: Var) -> Option<Ref<'_, Tensor<T>>> {
        if v.tape != self.id {
            return None;
        }
        Ref::filter_map(self.grads.borrow(), |g| g.get(v.index).and_then(|o| o.as_ref())).ok()
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, which: u8) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = ["add", "sub", "mul"][which as usize];
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.index].value, &nodes[b.index].value);
            let shape = binary_shape(name, x.shape(), y.shape())?;
            let n: usize = shape.iter().product();
            let (xd, yd) = (x.data(), y.data());
            let data: Vec<T> = match which {
                0 => (0..n).map(|i| bcast(xd, i) + bcast(yd, i)).collect(),
                1 => (0..n).map(|i| bcast(xd, i) - bcast(yd, i)).collect(),
                _ => (0..n).map(|i| bcast(xd, i) * bcast(yd, i)).collect(),
            };
            Tensor::from_parts(shape, data)
        };
        let op = match which {
            0 => Op::Add(a.index, b.index),
            1 => Op::Sub(a.index, b.index),
            _ => Op::Mul(a.index, b.index),
        };
        Ok(self.push(value, op))
    }

    /// Elementwise sum; a one-element operand broadcasts against the other.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes.borrow()[x.index].value.map(f);
        Ok(self.push(value, op))
    }

    /// Multiplies by a constant that is not itself differentiated.
    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x.index, c))
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddConst(x.index))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x.index))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log(x.index))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x.index))
    }

    pub fn powf(&self, x: Var, p: T) -> Result<Var> {
        self.unary(x, |v| v.powf(p), Op::Powf(x.index, p))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x.index))
    }

    pub fn activation(&self, x: Var, act: GateActivation) -> Result<Var> {
        self.unary(x, |v| act.apply(v), Op::Act(x.index, act))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.activation(x, GateActivation::Silu)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(x, GateActivation::Tanh)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(x, GateActivation::Relu)
    }

    pub fn leaky_relu(&self, x: Var) -> Result<Var> {
        self.activation(x, GateActivation::LeakyRelu)
    }

    /// Identity in the forward pass (bit-for-bit copy); contributes no
    /// gradient to `x` in the backward pass.
    pub fn stop_gradient(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes.borrow()[x.index].value.clone();
        Ok(self.push(value, Op::StopGradient(x.index)))
    }

    // ----- linear algebra & layout --------------------------------------

    /// `a @ b`. `b` is either a shared 2-D matrix applied to the last axis of
    /// `a`, or has the same leading (batch) dims as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.index].value, &nodes[b.index].value);
            let (sa, sb) = (x.shape(), y.shape());
            let mismatch = || Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch());
            }
            let k = sa[sa.len() - 1];
            let m = sa[sa.len() - 2];
            if sb[sb.len() - 2] != k {
                return Err(mismatch());
            }
            let n = sb[sb.len() - 1];
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let mut out = vec![T::zero(); shape.iter().product()];
            if sb.len() == 2 {
                let rows = x.numel() / k;
                gemm(rows, k, n, x.data(), false, y.data(), false, &mut out, false);
            } else if sb.len() == sa.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
                for ((xa, yb), o) in x
                    .data()
                    .chunks_exact(m * k)
                    .zip(y.data().chunks_exact(k * n))
                    .zip(out.chunks_exact_mut(m * n))
                {
                    gemm(m, k, n, xa, false, yb, false, o, false);
                }
            } else {
                return Err(mismatch());
            }
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::MatMul(a.index, b.index)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let r = t.shape().len();
            if r < 2 {
                return Err(Error::InvalidShape {
                    op: "transpose",
                    shape: t.shape().to_vec(),
                    reason: "needs rank >= 2".into(),
                });
            }
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 1, r - 2);
            let (d, s) = permute(t.data(), t.shape(), &axes);
            Tensor::from_parts(s, d)
        };
        Ok(self.push(value, Op::Transpose(x.index)))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let mut seen = vec![false; axes.len()];
            let valid = axes.len() == t.shape().len()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(Error::InvalidShape {
                    op: "permute",
                    shape: t.shape().to_vec(),
                    reason: format!("axes {axes:?} are not a permutation"),
                });
            }
            let (d, s) = permute(t.data(), t.shape(), axes);
            Tensor::from_parts(s, d)
        };
        Ok(self.push(value, Op::Permute(x.index, axes.to_vec())))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        check_shape("reshape", shape)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::from_parts(shape.to_vec(), t.data().to_vec())
        };
        Ok(self.push(value, Op::Reshape(x.index)))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        for &x in xs {
            self.check(x)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].index].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::InvalidShape {
                    op: "concat",
                    shape: first,
                    reason: format!("axis {axis} out of range"),
                });
            }
            let mut total = 0;
            for &x in xs {
                let s = nodes[x.index].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &x in xs {
                    let t = &nodes[x.index].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, Op::Concat(xs.iter().map(|v| v.index).collect(), axis)))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let s = t.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(Error::InvalidShape {
                    op: "slice",
                    shape: s.to_vec(),
                    reason: format!("range {start}..{} on axis {axis}", start + len),
                });
            }
            let (outer, extent, inner) = axis_split(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, Op::Slice { input: x.index, axis, start }))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: T = self.nodes.borrow()[x.index].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.index)))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let m = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64)
        };
        Ok(self.push(Tensor::scalar(m), Op::Mean(x.index)))
    }

    fn reduce_last(&self, x: Var, f: impl Fn(&[T]) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let d = last_dim(op.name(), t.shape())?;
            let data: Vec<T> = t.data().chunks_exact(d).map(f).collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, op))
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_last(&self, x: Var) -> Result<Var> {
        self.reduce_last(
            x,
            |r| r.iter().copied().sum::<T>() / T::of(r.len() as f64),
            Op::MeanLast(x.index),
        )
    }

    /// Population variance over the last axis, keeping it with extent 1.
    pub fn var_last(&self, x: Var) -> Result<Var> {
        self.reduce_last(
            x,
            |r| {
                let n = T::of(r.len() as f64);
                let mu = r.iter().copied().sum::<T>() / n;
                r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n
            },
            Op::VarLast(x.index),
        )
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let d = last_dim("softmax", t.shape())?;
            Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), d))
        };
        Ok(self.push(value, Op::Softmax(x.index)))
    }

    /// Softmax of `scale * x` over the last axis where row `i` of each
    /// trailing square block only sees columns `j <= i`; masked entries are 0.
    pub fn causal_softmax(&self, x: Var, scale: T) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let s = t.shape();
            let r = s.len();
            if r < 2 || s[r - 1] != s[r - 2] {
                return Err(Error::InvalidShape {
                    op: "causal_softmax",
                    shape: s.to_vec(),
                    reason: "trailing dims must be square".into(),
                });
            }
            let n = s[r - 1];
            let mut out = vec![T::zero(); t.numel()];
            let mut buf = vec![T::zero(); n];
            for (row_id, (row, o)) in t
                .data()
                .chunks_exact(n)
                .zip(out.chunks_exact_mut(n))
                .enumerate()
            {
                let i = row_id % n;
                for (b, &v) in buf[..=i].iter_mut().zip(&row[..=i]) {
                    *b = v * scale;
                }
                softmax_into(&buf[..=i], &mut o[..=i]);
            }
            Tensor::from_parts(s.to_vec(), out)
        };
        Ok(self.push(value, Op::CausalSoftmax(x.index, scale)))
    }

    /// Mean next-token cross-entropy. `logits` has shape `[.., vocab]` and
    /// `targets` holds one class id per row.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.index].value;
            let v = last_dim("cross_entropy", t.shape())?;
            let rows = t.numel() / v;
            if targets.len() != rows {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: t.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
                return Err(Error::TokenOutOfRange { id: bad, vocab: v });
            }
            let probs = softmax_rows(t.data(), v);
            let mut total = T::zero();
            for (row, &c) in t.data().chunks_exact(v).zip(targets) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                total = total + (lse - row[c]);
            }
            (total / T::of(rows as f64), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        let (value, inv_rms) = {
            let nodes = self.nodes.borrow();
            let (t, g) = (&nodes[x.index].value, &nodes[gain.index].value);
            let d = last_dim("rms_norm", t.shape())?;
            if g.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "rms_norm",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(t.numel());
            let mut inv_rms = Vec::with_capacity(t.numel() / d);
            let dn = T::of(d as f64);
            for row in t.data().chunks_exact(d) {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
                let inv = T::one() / (ms + eps).sqrt();
                inv_rms.push(inv);
                out.extend(row.iter().zip(g.data()).map(|(&v, &w)| w * (v * inv)));
            }
            (Tensor::from_parts(t.shape().to_vec(), out), inv_rms)
        };
        Ok(self.push(
            value,
            Op::RmsNorm {
                x: x.index,
                gain: gain.index,
                inv_rms,
            },
        ))
    }

    /// Row lookup into a `[vocab, d]` table; output shape `lead ++ [d]`.
    pub fn embedding(&self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        self.check(table)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.index].value;
            if t.shape().len() != 2 || lead.iter().product::<usize>() != ids.len() {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    lhs: t.shape().to_vec(),
                    rhs: lead.to_vec(),
                });
            }
            let (vocab, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            let mut shape = lead.to_vec();
            shape.push(d);
            check_shape("embedding", &shape)?;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.index,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position embedding over `[.., seq, dim]`, rotating interleaved
    /// pairs `(2i, 2i+1)` at position `t` by `t * base^(-2i/dim)`.
    pub fn rope(&self, x: Var, base: f64) -> Result<Var> {
        self.check(x)?;
        let (value, cos, sin) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            let s = t.shape();
            let r = s.len();
            if r < 2 || !s[r - 1].is_multiple_of(2) {
                return Err(Error::InvalidShape {
                    op: "rope",
                    shape: s.to_vec(),
                    reason: "needs [.., seq, even dim]".into(),
                });
            }
            let (seq, dim) = (s[r - 2], s[r - 1]);
            let half = dim / 2;
            let mut cos = Vec::with_capacity(seq * half);
            let mut sin = Vec::with_capacity(seq * half);
            for pos in 0..seq {
                for i in 0..half {
                    let freq = base.powf(-2.0 * i as f64 / dim as f64);
                    let angle = pos as f64 * freq;
                    cos.push(T::of(angle.cos()));
                    sin.push(T::of(angle.sin()));
                }
            }
            let mut out = vec![T::zero(); t.numel()];
            for (row_id, (row, o)) in t
                .data()
                .chunks_exact(dim)
                .zip(out.chunks_exact_mut(dim))
                .enumerate()
            {
                let pos = row_id % seq;
                for i in 0..half {
                    let (c, sn) = (cos[pos * half + i], sin[pos * half + i]);
                    let (a, b) = (row[2 * i], row[2 * i + 1]);
                    o[2 * i] = a * c - b * sn;
                    o[2 * i + 1] = a * sn + b * c;
                }
            }
            (Tensor::from_parts(s.to_vec(), out), cos, sin)
        };
        Ok(self.push(value, Op::Rope { x: x.index, cos, sin }))
    }

    // ----- backward --------------------------------------------------------

    /// Reverse pass from a one-element `loss`. Leaf gradients are stored on
    /// the tape and read back with [`Tape::grad`]; contributions accumulate
    /// additively across fan-out. Any non-finite gradient aborts the pass.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut leaf_grads = self.grads.borrow_mut();
        leaf_grads.clear();
        leaf_grads.resize_with(nodes.len(), || None);

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (input, contrib) in vjp(&nodes, node, g) {
                if !contrib.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteGradient { op: node.op.name() });
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian products of one node: `(input index, d loss / d input)`
/// for every input that requires a gradient.
fn vjp<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: Vec<T>) -> Vec<(usize, Vec<T>)> {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf | Op::StopGradient(_) => {}
        Op::Add(a, b) => {
            if needs(*b) {
                out.push((*b, unbroadcast(g.clone(), val(*b).numel())));
            }
            if needs(*a) {
                out.push((*a, unbroadcast(g, val(*a).numel())));
            }
        }
        Op::Sub(a, b) => {
            if needs(*b) {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                out.push((*b, unbroadcast(neg, val(*b).numel())));
            }
            if needs(*a) {
                out.push((*a, unbroadcast(g, val(*a).numel())));
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * bcast(xb, i)).collect();
                out.push((*a, unbroadcast(ga, xa.len())));
            }
            if needs(*b) {
                let gb: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * bcast(xa, i)).collect();
                out.push((*b, unbroadcast(gb, xb.len())));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.iter().map(|&v| v * *c).collect())),
        Op::AddConst(a) | Op::Reshape(a) => out.push((*a, g)),
        Op::MatMul(a, b) => {
            let (x, w) = (val(*a), val(*b));
            let (sa, sb) = (x.shape(), w.shape());
            let k = sa[sa.len() - 1];
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let rows = x.numel() / k;
                if needs(*a) {
                    let mut ga = vec![T::zero(); x.numel()];
                    gemm(rows, n, k, &g, false, w.data(), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); w.numel()];
                    gemm(k, rows, n, x.data(), true, &g, false, &mut gb, false);
                    out.push((*b, gb));
                }
            } else {
                if needs(*a) {
                    let mut ga = vec![T::zero(); x.numel()];
                    for ((gc, wb), o) in g
                        .chunks_exact(m * n)
                        .zip(w.data().chunks_exact(k * n))
                        .zip(ga.chunks_exact_mut(m * k))
                    {
                        gemm(m, n, k, gc, false, wb, true, o, false);
                    }
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); w.numel()];
                    for ((gc, xa), o) in g
                        .chunks_exact(m * n)
                        .zip(x.data().chunks_exact(m * k))
                        .zip(gb.chunks_exact_mut(k * n))
                    {
                        gemm(k, m, n, xa, true, gc, false, o, false);
                    }
                    out.push((*b, gb));
                }
            }
        }
        Op::Transpose(a) => {
            let r = y.shape().len();
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 1, r - 2);
            out.push((*a, permute(&g, y.shape(), &axes).0));
        }
        Op::Permute(a, axes) => out.push((*a, permute(&g, y.shape(), &inverse_axes(axes)).0)),
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let total = y.shape()[*axis] * inner;
            let mut offset = 0;
            for &x in xs {
                let block = val(x).shape()[*axis] * inner;
                if needs(x) {
                    let mut gx = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gx.extend_from_slice(&g[base..base + block]);
                    }
                    out.push((x, gx));
                }
                offset += block;
            }
        }
        Op::Slice { input, axis, start } => {
            let xs = val(*input).shape();
            let (outer, extent, inner) = axis_split(xs, *axis);
            let len = y.shape()[*axis];
            let mut gx = vec![T::zero(); val(*input).numel()];
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            out.push((*input, gx));
        }
        Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
        Op::Mean(a) => {
            let n = val(*a).numel();
            out.push((*a, vec![g[0] / T::of(n as f64); n]));
        }
        Op::MeanLast(a) => {
            let x = val(*a);
            let d = *x.shape().last().unwrap();
            let dn = T::of(d as f64);
            let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / dn, d)).collect();
            out.push((*a, gx));
        }
        Op::VarLast(a) => {
            let x = val(*a);
            let d = *x.shape().last().unwrap();
            let dn = T::of(d as f64);
            let two = T::of(2.0);
            let mut gx = Vec::with_capacity(x.numel());
            for (row, &gv) in x.data().chunks_exact(d).zip(&g) {
                let mu = row.iter().copied().sum::<T>() / dn;
                gx.extend(row.iter().map(|&v| gv * two * (v - mu) / dn));
            }
            out.push((*a, gx));
        }
        Op::Exp(a) => out.push((*a, g.iter().zip(y.data()).map(|(&gv, &e)| gv * e).collect())),
        Op::Log(a) => out.push((
            *a,
            g.iter().zip(val(*a).data()).map(|(&gv, &x)| gv / x).collect(),
        )),
        Op::Sqrt(a) => out.push((
            *a,
            g.iter()
                .zip(y.data())
                .map(|(&gv, &s)| gv / (T::of(2.0) * s))
                .collect(),
        )),
        Op::Powf(a, p) => out.push((
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&gv, &x)| gv * *p * x.powf(*p - T::one()))
                .collect(),
        )),
        Op::Sigmoid(a) => out.push((
            *a,
            g.iter()
                .zip(y.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect(),
        )),
        Op::Act(a, act) => out.push((
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(&gv, &x)| gv * act.derivative(x))
                .collect(),
        )),
        Op::Softmax(a) => {
            let d = *y.shape().last().unwrap();
            out.push((*a, softmax_rows_backward(y.data(), &g, d, T::one())));
        }
        Op::CausalSoftmax(a, scale) => {
            let d = *y.shape().last().unwrap();
            out.push((*a, softmax_rows_backward(y.data(), &g, d, *scale)));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = *val(*logits).shape().last().unwrap();
            let scale = g[0] / T::of(targets.len() as f64);
            let mut gx = probs.clone();
            for (row, &c) in gx.chunks_exact_mut(v).zip(targets) {
                row[c] = row[c] - T::one();
                row.iter_mut().for_each(|p| *p = *p * scale);
            }
            out.push((*logits, gx));
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xt, gt) = (val(*x), val(*gain));
            let d = gt.numel();
            let dn = T::of(d as f64);
            if needs(*gain) {
                let mut gg = vec![T::zero(); d];
                for ((row, gr), &inv) in xt.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                    for ((acc, &xv), &gv) in gg.iter_mut().zip(row).zip(gr) {
                        *acc = *acc + gv * xv * inv;
                    }
                }
                out.push((*gain, gg));
            }
            if needs(*x) {
                let mut gx = Vec::with_capacity(xt.numel());
                for ((row, gr), &inv) in xt.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                    let dot: T = row
                        .iter()
                        .zip(gr)
                        .zip(gt.data())
                        .map(|((&xv, &gv), &w)| gv * w * xv * inv)
                        .sum::<T>()
                        / dn;
                    gx.extend(
                        row.iter()
                            .zip(gr)
                            .zip(gt.data())
                            .map(|((&xv, &gv), &w)| inv * (gv * w - xv * inv * dot)),
                    );
                }
                out.push((*x, gx));
            }
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let d = t.shape()[1];
            let mut gt = vec![T::zero(); t.numel()];
            for (&id, gr) in ids.iter().zip(g.chunks_exact(d)) {
                for (acc, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                    *acc = *acc + gv;
                }
            }
            out.push((*table, gt));
        }
        Op::Rope { x, cos, sin } => {
            let s = y.shape();
            let (seq, dim) = (s[s.len() - 2], s[s.len() - 1]);
            let half = dim / 2;
            let mut gx = vec![T::zero(); g.len()];
            for (row_id, (gr, o)) in g.chunks_exact(dim).zip(gx.chunks_exact_mut(dim)).enumerate() {
                let pos = row_id % seq;
                for i in 0..half {
                    let (c, sn) = (cos[pos * half + i], sin[pos * half + i]);
                    let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                    o[2 * i] = g0 * c + g1 * sn;
                    o[2 * i + 1] = g1 * c - g0 * sn;
                }
            }
            out.push((*x, gx));
        }
    }
    out
}
