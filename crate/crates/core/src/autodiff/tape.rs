use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Recorded operation together with whatever forward values its local
/// derivative needs. Parents are `None` when that operand was a constant.
#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        lhs: Option<usize>,
        rhs: Option<usize>,
        lhs_len: usize,
        rhs_len: usize,
    },
    Sub {
        lhs: Option<usize>,
        rhs: Option<usize>,
        lhs_len: usize,
        rhs_len: usize,
    },
    Mul {
        lhs: Option<usize>,
        rhs: Option<usize>,
        lhs_val: Vec<f64>,
        rhs_val: Vec<f64>,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Shift {
        input: usize,
    },
    MatMul {
        lhs: Option<usize>,
        rhs: Option<usize>,
        lhs_val: Vec<f64>,
        rhs_val: Vec<f64>,
        m: usize,
        k: usize,
        n: usize,
    },
    Tanh {
        input: usize,
        output: Vec<f64>,
    },
    Relu {
        input: usize,
        value: Vec<f64>,
    },
    Exp {
        input: usize,
        output: Vec<f64>,
    },
    Sigmoid {
        input: usize,
        output: Vec<f64>,
    },
    Abs {
        input: usize,
        value: Vec<f64>,
    },
    Square {
        input: usize,
        value: Vec<f64>,
    },
    MaxScalar {
        input: usize,
        value: Vec<f64>,
        floor: f64,
    },
    MinScalar {
        input: usize,
        value: Vec<f64>,
        ceil: f64,
    },
    Sum {
        input: usize,
        len: usize,
    },
    Mean {
        input: usize,
        len: usize,
    },
    MeanAxis {
        input: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<(Option<usize>, usize)>,
        outer: usize,
    },
    Select {
        input: usize,
        len: usize,
        index: usize,
    },
    DiscountBlend {
        input: usize,
        alpha: f64,
    },
    StraightThrough {
        predicted: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    len: usize,
}

/// Append-only record of differentiable operations.
///
/// A tape is a single-owner context: operations are methods on the tape, and
/// whether they are recorded is governed by [`Tape::set_recording`]. An
/// operation produces a tracked tensor only when recording is on and at least
/// one operand is tracked on this tape; otherwise the result is a constant and
/// no node is appended.
///
/// [`Tape::backward`] does not consume the tape, so several scalar outputs of
/// the same graph can be differentiated in turn. Node handles are tagged with
/// the tape id and are rejected by any other tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a leaf tensor, or `None` for constants and foreign tensors.
    pub fn get(&self, tensor: &Tensor) -> Option<&[f64]> {
        let node = tensor.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.leaves.get(&node.index).map(Vec::as_slice)
    }

    /// Gradient for `tensor`, all zeros when it is not a leaf of this graph.
    pub fn get_or_zero(&self, tensor: &Tensor) -> Vec<f64> {
        self.get(tensor)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.len()])
    }

    /// Populates the `grad` slot of every tensor in `tensors`.
    pub fn fill(&self, tensors: &mut [Tensor]) {
        for t in tensors {
            let g = self.get_or_zero(t);
            t.set_grad(g).expect("gradient length matches tensor");
        }
    }

    pub fn collect(&self, tensors: &[Tensor]) -> Vec<Vec<f64>> {
        tensors.iter().map(|t| self.get_or_zero(t)).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Reduces a gradient of a broadcast operand back to its own length.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        grad.to_vec()
    } else {
        debug_assert_eq!(len, 1);
        vec![grad.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape whose recording is switched off; handy for pure forward work.
    pub fn inert() -> Self {
        let tape = Self::new();
        tape.recording.set(false);
        tape
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Switches recording on or off and returns the previous setting.
    pub fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    /// Runs `f` with recording switched off, restoring the previous mode.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.set_recording(false);
        let out = f();
        self.set_recording(prev);
        out
    }

    /// Runs `f` with recording set to `on`, restoring the previous mode.
    pub fn with_recording<R>(&self, on: bool, f: impl FnOnce() -> R) -> R {
        let prev = self.set_recording(on);
        let out = f();
        self.set_recording(prev);
        out
    }

    /// Registers a differentiable leaf holding `value`'s data.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let index = self.push(Op::Leaf, value.len());
        Tensor::from_parts(value.shape().to_vec(), value.data().to_vec(), Some(self.node(index)))
    }

    fn node(&self, index: usize) -> NodeId {
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn push(&self, op: Op, len: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn parent(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(n) => Err(Error::ForeignTensor {
                expected: self.id,
                found: n.tape,
            }),
        }
    }

    /// Emits the result tensor, recording `op` only when it matters.
    fn emit(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        any_tracked: bool,
        op: impl FnOnce() -> Op,
    ) -> Tensor {
        if any_tracked && self.recording.get() {
            let index = self.push(op(), data.len());
            Tensor::from_parts(shape, data, Some(self.node(index)))
        } else {
            Tensor::from_parts(shape, data, None)
        }
    }

    fn unary(
        &self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize, &[f64], &[f64]) -> Op,
    ) -> Result<Tensor> {
        let p = self.parent(x)?;
        let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let saved = out.clone();
        Ok(self.emit(x.shape().to_vec(), out, p.is_some(), || {
            op(p.unwrap(), x.data(), &saved)
        }))
    }

    fn broadcast_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<Vec<usize>> {
        if x.shape() == y.shape() {
            Ok(x.shape().to_vec())
        } else if y.len() == 1 {
            Ok(x.shape().to_vec())
        } else if x.len() == 1 {
            Ok(y.shape().to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            })
        }
    }

    fn zip_with(
        x: &Tensor,
        y: &Tensor,
        len: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let xs = x.data();
        let ys = y.data();
        (0..len)
            .map(|i| {
                let a = if xs.len() == 1 { xs[0] } else { xs[i] };
                let b = if ys.len() == 1 { ys[0] } else { ys[i] };
                f(a, b)
            })
            .collect()
    }

    pub fn add(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let shape = Self::broadcast_shape("add", x, y)?;
        let (px, py) = (self.parent(x)?, self.parent(y)?);
        let len = shape.iter().product();
        let out = Self::zip_with(x, y, len, |a, b| a + b);
        Ok(self.emit(shape, out, px.is_some() || py.is_some(), || Op::Add {
            lhs: px,
            rhs: py,
            lhs_len: x.len(),
            rhs_len: y.len(),
        }))
    }

    pub fn sub(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let shape = Self::broadcast_shape("sub", x, y)?;
        let (px, py) = (self.parent(x)?, self.parent(y)?);
        let len = shape.iter().product();
        let out = Self::zip_with(x, y, len, |a, b| a - b);
        Ok(self.emit(shape, out, px.is_some() || py.is_some(), || Op::Sub {
            lhs: px,
            rhs: py,
            lhs_len: x.len(),
            rhs_len: y.len(),
        }))
    }

    /// Elementwise product; either side may be a one-element tensor.
    pub fn mul(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let shape = Self::broadcast_shape("mul", x, y)?;
        let (px, py) = (self.parent(x)?, self.parent(y)?);
        let len = shape.iter().product();
        let out = Self::zip_with(x, y, len, |a, b| a * b);
        Ok(self.emit(shape, out, px.is_some() || py.is_some(), || Op::Mul {
            lhs: px,
            rhs: py,
            lhs_val: x.data().to_vec(),
            rhs_val: y.data().to_vec(),
        }))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        self.unary(x, |v| v * factor, |input, _, _| Op::Scale { input, factor })
    }

    pub fn neg(&self, x: &Tensor) -> Result<Tensor> {
        self.scale(x, -1.0)
    }

    /// Addition of a constant.
    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, |v| v + c, |input, _, _| Op::Shift { input })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let (px, py) = (self.parent(x)?, self.parent(y)?);
        let a = x.data();
        let b = y.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        Ok(self.emit(vec![m, n], out, px.is_some() || py.is_some(), || Op::MatMul {
            lhs: px,
            rhs: py,
            lhs_val: if py.is_some() { a.to_vec() } else { Vec::new() },
            rhs_val: if px.is_some() { b.to_vec() } else { Vec::new() },
            m,
            k,
            n,
        }))
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, f64::tanh, |input, _, out| Op::Tanh {
            input,
            output: out.to_vec(),
        })
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v.max(0.0), |input, value, _| Op::Relu {
            input,
            value: value.to_vec(),
        })
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, f64::exp, |input, _, out| Op::Exp {
            input,
            output: out.to_vec(),
        })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, sigmoid, |input, _, out| Op::Sigmoid {
            input,
            output: out.to_vec(),
        })
    }

    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, f64::abs, |input, value, _| Op::Abs {
            input,
            value: value.to_vec(),
        })
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v * v, |input, value, _| Op::Square {
            input,
            value: value.to_vec(),
        })
    }

    /// Elementwise `max(x, floor)`. The derivative at `x == floor` is 0.
    pub fn max_scalar(&self, x: &Tensor, floor: f64) -> Result<Tensor> {
        self.unary(x, |v| v.max(floor), |input, value, _| Op::MaxScalar {
            input,
            value: value.to_vec(),
            floor,
        })
    }

    /// Elementwise `min(x, ceil)`. The derivative at `x == ceil` is 0.
    pub fn min_scalar(&self, x: &Tensor, ceil: f64) -> Result<Tensor> {
        self.unary(x, |v| v.min(ceil), |input, value, _| Op::MinScalar {
            input,
            value: value.to_vec(),
            ceil,
        })
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.parent(x)?;
        let total: f64 = x.data().iter().sum();
        let len = x.len();
        Ok(self.emit(vec![1], vec![total], p.is_some(), || Op::Sum {
            input: p.unwrap(),
            len,
        }))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.parent(x)?;
        let len = x.len();
        let total: f64 = x.data().iter().sum();
        Ok(self.emit(vec![1], vec![total / len as f64], p.is_some(), || Op::Mean {
            input: p.unwrap(),
            len,
        }))
    }

    /// Mean along `axis`; the axis is removed from the output shape (a
    /// reduction of a 1-D tensor yields shape `[1]`).
    pub fn mean_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "mean_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = x.data();
        for o in 0..outer {
            for a in 0..axis_len {
                for i in 0..inner {
                    out[o * inner + i] += data[(o * axis_len + a) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= axis_len as f64;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let p = self.parent(x)?;
        Ok(self.emit(out_shape, out, p.is_some(), || Op::MeanAxis {
            input: p.unwrap(),
            outer,
            axis_len,
            inner,
        }))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        for x in &xs[1..] {
            let ok = x.shape().len() == rank
                && x
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let mut parents = Vec::with_capacity(xs.len());
        for x in xs {
            parents.push((self.parent(x)?, x.shape()[axis] * inner));
        }
        let tracked = parents.iter().any(|(p, _)| p.is_some());
        Ok(self.emit(shape, out, tracked, || Op::Concat {
            inputs: parents,
            outer,
        }))
    }

    /// Picks one element (by flat index) as a `[1]` tensor.
    pub fn select(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        if index >= x.len() {
            return Err(Error::ShapeMismatch {
                op: "select",
                lhs: x.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let p = self.parent(x)?;
        let len = x.len();
        Ok(self.emit(vec![1], vec![x.data()[index]], p.is_some(), || Op::Select {
            input: p.unwrap(),
            len,
            index,
        }))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&self, x: &Tensor) -> Tensor {
        x.detach()
    }

    /// `alpha * x + (1 - alpha) * stop_gradient(x)` as a single node: the
    /// forward value is `x` bit for bit, and the backward pass scales the
    /// incoming gradient by `alpha`.
    pub fn discount_blend(&self, x: &Tensor, alpha: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("alpha", "alpha must lie in [0,1]"));
        }
        let p = self.parent(x)?;
        Ok(self.emit(x.shape().to_vec(), x.data().to_vec(), p.is_some(), || {
            Op::DiscountBlend {
                input: p.unwrap(),
                alpha,
            }
        }))
    }

    /// Latent connector `predicted + stop_gradient(real - predicted)`, fused so
    /// that the forward value is `real` bit for bit while the gradient flows to
    /// `predicted` unchanged.
    pub fn straight_through(&self, predicted: &Tensor, real: &Tensor) -> Result<Tensor> {
        if predicted.shape() != real.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: predicted.shape().to_vec(),
                rhs: real.shape().to_vec(),
            });
        }
        let p = self.parent(predicted)?;
        Ok(self.emit(real.shape().to_vec(), real.data().to_vec(), p.is_some(), || {
            Op::StraightThrough {
                predicted: p.unwrap(),
            }
        }))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf on this tape receives an entry in the returned map; leaves
    /// the loss does not depend on get zeros. The tape is left intact.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut leaves: BTreeMap<usize, Vec<f64>> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| (i, vec![0.0; n.len]))
            .collect();
        let Some(root) = self.parent(loss)? else {
            return Ok(Gradients {
                tape: self.id,
                leaves,
            });
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, g);
                }
                Op::Add {
                    lhs,
                    rhs,
                    lhs_len,
                    rhs_len,
                } => {
                    if let Some(l) = lhs {
                        accumulate(&mut grads[*l], reduce_to(&g, *lhs_len));
                    }
                    if let Some(r) = rhs {
                        accumulate(&mut grads[*r], reduce_to(&g, *rhs_len));
                    }
                }
                Op::Sub {
                    lhs,
                    rhs,
                    lhs_len,
                    rhs_len,
                } => {
                    if let Some(l) = lhs {
                        accumulate(&mut grads[*l], reduce_to(&g, *lhs_len));
                    }
                    if let Some(r) = rhs {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads[*r], reduce_to(&neg, *rhs_len));
                    }
                }
                Op::Mul {
                    lhs,
                    rhs,
                    lhs_val,
                    rhs_val,
                } => {
                    let at = |vals: &[f64], i: usize| if vals.len() == 1 { vals[0] } else { vals[i] };
                    if let Some(l) = lhs {
                        let c: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * at(rhs_val, i)).collect();
                        accumulate(&mut grads[*l], reduce_to(&c, lhs_val.len()));
                    }
                    if let Some(r) = rhs {
                        let c: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * at(lhs_val, i)).collect();
                        accumulate(&mut grads[*r], reduce_to(&c, rhs_val.len()));
                    }
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads[*input], g.iter().map(|v| v * factor).collect());
                }
                Op::Shift { input } => accumulate(&mut grads[*input], g),
                Op::MatMul {
                    lhs,
                    rhs,
                    lhs_val,
                    rhs_val,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    if let Some(l) = lhs {
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &rhs_val[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(a, b)| a * b).sum();
                            }
                        }
                        accumulate(&mut grads[*l], da);
                    }
                    if let Some(r) = rhs {
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a = lhs_val[i * k + p];
                                let dst = &mut db[p * n..(p + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += a * gv;
                                }
                            }
                        }
                        accumulate(&mut grads[*r], db);
                    }
                }
                Op::Tanh { input, output } => {
                    let c = g.iter().zip(output).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Relu { input, value } => {
                    let c = g
                        .iter()
                        .zip(value)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Exp { input, output } => {
                    let c = g.iter().zip(output).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Sigmoid { input, output } => {
                    let c = g.iter().zip(output).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Abs { input, value } => {
                    let c = g
                        .iter()
                        .zip(value)
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Square { input, value } => {
                    let c = g.iter().zip(value).map(|(g, x)| 2.0 * x * g).collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::MaxScalar { input, value, floor } => {
                    let c = g
                        .iter()
                        .zip(value)
                        .map(|(g, x)| if *x > *floor { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::MinScalar { input, value, ceil } => {
                    let c = g
                        .iter()
                        .zip(value)
                        .map(|(g, x)| if *x < *ceil { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*input], c);
                }
                Op::Sum { input, len } => accumulate(&mut grads[*input], vec![g[0]; *len]),
                Op::Mean { input, len } => {
                    accumulate(&mut grads[*input], vec![g[0] / *len as f64; *len])
                }
                Op::MeanAxis {
                    input,
                    outer,
                    axis_len,
                    inner,
                } => {
                    let mut c = vec![0.0; outer * axis_len * inner];
                    let scale = 1.0 / *axis_len as f64;
                    for o in 0..*outer {
                        for a in 0..*axis_len {
                            for i in 0..*inner {
                                c[(o * axis_len + a) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads[*input], c);
                }
                Op::Concat { inputs, outer } => {
                    let row_len: usize = inputs.iter().map(|(_, w)| w).sum();
                    let mut offset = 0;
                    for (p, width) in inputs {
                        if let Some(p) = p {
                            let mut c = Vec::with_capacity(outer * width);
                            for o in 0..*outer {
                                let start = o * row_len + offset;
                                c.extend_from_slice(&g[start..start + width]);
                            }
                            accumulate(&mut grads[*p], c);
                        }
                        offset += width;
                    }
                }
                Op::Select { input, len, index } => {
                    let mut c = vec![0.0; *len];
                    c[*index] = g[0];
                    accumulate(&mut grads[*input], c);
                }
                Op::DiscountBlend { input, alpha } => {
                    accumulate(&mut grads[*input], g.iter().map(|v| v * alpha).collect());
                }
                Op::StraightThrough { predicted } => accumulate(&mut grads[*predicted], g),
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
