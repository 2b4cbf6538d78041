//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Nodes are appended in execution order, so the record is topologically
//! sorted by construction; [`Tape::gradients`] walks it once in reverse.

use crate::contract::{contract, ContractSpec};
use crate::error::{NumericsError, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, BinaryOp, PoolMode, Tensor, UnaryOp};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Contract(ContractSpec, Var, Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, usize, Vec<usize>),
    Softmax(Var, usize),
    Normalize(Var, usize, Vec<T>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    BroadcastTo(Var),
    Pool(Var, PoolMode, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Outcome of [`backward`]: which trainable parameters received no gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackwardReport {
    pub detached: Vec<String>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let value = self.value(x).unary(op)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unary(op, x), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).binary(self.value(b), op)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
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

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Clamps to `[lo, hi]`; the gradient is blocked outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        let value = contract(self.value(a), self.value(b), &spec)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Contract(spec, a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.contract(a, b, "ij,jk->ik")
    }

    /// `x · w + b` over the last axis of `x`, with `w` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let fan_in = *shape
            .last()
            .ok_or_else(|| NumericsError::Invalid("linear: input must have rank ≥ 1".into()))?;
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = self.reshape(x, [rows, fan_in])?;
        let y = self.matmul(flat, w)?;
        let fan_out = self.shape(w)[1];
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(fan_out);
        let y = self.reshape(y, out_shape)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).sum_axis(axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x, axis), rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).mean_axis(axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x, axis), rg))
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, arg) = self.value(x).max_axis(axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Max(x, axis, arg), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.mean(flat, 0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Zero-mean, unit-variance standardization along `axis`.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let (value, inv) = self.value(x).normalize_axis(axis, eps)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Normalize(x, axis, inv), rg))
    }

    /// Layer normalization along the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let axis = self
            .value(x)
            .rank()
            .checked_sub(1)
            .ok_or_else(|| NumericsError::Invalid("layer_norm: input must have rank ≥ 1".into()))?;
        let n = self.normalize(x, axis, eps)?;
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut axes: Vec<usize> = (0..rank).collect();
        if a >= rank || b >= rank {
            return Err(NumericsError::AxisOutOfRange {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).index_select(axis, indices)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::IndexSelect(x, axis, indices.to_vec()), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let extent = self
            .value(x)
            .shape()
            .get(axis)
            .copied()
            .ok_or(NumericsError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: self.value(x).rank(),
            })?;
        if start + len > extent {
            return Err(NumericsError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).broadcast_to(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::BroadcastTo(x), rg))
    }

    /// Pools the last two axes to `out_h × out_w`; see [`Tensor::pool2d`].
    pub fn pool2d(&mut self, x: Var, out_h: usize, out_w: usize, mode: PoolMode) -> Result<Var> {
        let (value, arg) = self.value(x).pool2d(out_h, out_w, mode)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pool(x, mode, arg), rg))
    }

    /// Gradient of scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Unary(op, x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * op.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?)?;
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.scale(-T::one())),
                    BinaryOp::Mul => (g.mul(bv)?, g.mul(av)?),
                    BinaryOp::Div => {
                        let ga = g.div(bv)?;
                        let gb = g.mul(&node.value)?.div(bv)?.scale(-T::one());
                        (ga, gb)
                    }
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, ga.sum_to_shape(av.shape())?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gb.sum_to_shape(bv.shape())?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?)?;
            }
            Op::Contract(spec, a, b) => {
                if self.rg(*a) {
                    let ga = contract(g, self.value(*b), &spec.lhs_adjoint())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = contract(g, self.value(*a), &spec.rhs_adjoint())?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let shape = self.value(*x).shape().to_vec();
                let mut kept = shape.clone();
                kept[*axis] = 1;
                let mut gx = g.reshape(kept)?.broadcast_to(&shape)?;
                if matches!(node.op, Op::Mean(..)) {
                    gx = gx.scale(T::one() / T::lit(shape[*axis] as f64));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Max(x, axis, arg) => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = Tensor::zeros(shape);
                let d = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let k = o * inner + j;
                        d[(o * len + arg[k]) * inner + j] = g.data()[k];
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut gx = Tensor::zeros(y.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: T = (0..len).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = y.data()[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Normalize(x, axis, inv) => {
                let xhat = &node.value;
                let (outer, len, inner) = split_axis(xhat.shape(), *axis);
                let n = T::lit(len as f64);
                let mut gx = Tensor::zeros(xhat.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let mg: T = (0..len).map(|i| g.data()[at(i)]).sum::<T>() / n;
                        let mgx: T = (0..len).map(|i| g.data()[at(i)] * xhat.data()[at(i)]).sum::<T>() / n;
                        let is = inv[o * inner + j];
                        for i in 0..len {
                            d[at(i)] = is * (g.data()[at(i)] - mg - xhat.data()[at(i)] * mgx);
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) | Op::BroadcastTo(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = if matches!(node.op, Op::Reshape(_)) {
                    g.reshape(shape)?
                } else {
                    g.sum_to_shape(&shape)?
                };
                self.accumulate(grads, *x, gx)?;
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inverse)?)?;
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).shape()[*axis];
                    if self.rg(x) {
                        self.accumulate(grads, x, g.narrow(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::IndexSelect(x, axis, idx) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::index_add(shape, *axis, idx, g))?;
            }
            Op::Pool(x, mode, arg) => {
                let shape = self.value(*x).shape();
                let r = node.value.rank();
                let (oh, ow) = (node.value.shape()[r - 2], node.value.shape()[r - 1]);
                let gx = Tensor::pool2d_backward(shape, oh, ow, *mode, arg, g);
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }

    /// Parameters recorded on this tape.
    fn params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((Var(i), id)),
            _ => None,
        })
    }
}

/// Back-propagates `loss` and adds each parameter's gradient into `store`.
///
/// Trainable parameters with no path to the loss keep a zero gradient and are
/// listed in the report.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var, store: &mut ParamStore<T>) -> Result<BackwardReport> {
    let grads = tape.gradients(loss)?;
    let mut reached = vec![false; store.len()];
    for (var, id) in tape.params() {
        if let Some(g) = grads.get(var) {
            reached[id.index()] = true;
            store.get_mut(id).grad.add_assign(g)?;
        }
    }
    let detached = store
        .iter()
        .filter(|(id, p)| p.trainable && !reached[id.index()])
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(BackwardReport { detached })
}
