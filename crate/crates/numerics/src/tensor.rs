use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Square,
    Gelu,
    Relu,
    Tanh,
    Sqrt,
    Cos,
    Sin,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Output shape of a trailing-axis broadcast.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl BinaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

impl UnaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Square => "square",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Relu => "relu",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Cos => "cos",
            UnaryOp::Sin => "sin",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }

    #[inline]
    pub(crate) fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
            UnaryOp::Gelu => {
                let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    #[inline]
    pub(crate) fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Neg => -T::one(),
            UnaryOp::Square => T::lit(2.0) * x,
            UnaryOp::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
            UnaryOp::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::Tanh => T::one() - y * y,
            UnaryOp::Sqrt => T::lit(0.5) / y,
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Sin => x.cos(),
            UnaryOp::Exp => y,
            UnaryOp::Log => T::one() / x,
        }
    }

    fn check_domain<T: Scalar>(self, data: &[T]) -> Result<()> {
        let bad = match self {
            UnaryOp::Sqrt => data.iter().position(|&v| v < T::zero()),
            UnaryOp::Log => data.iter().position(|&v| v <= T::zero()),
            _ => None,
        };
        match bad {
            Some(i) => Err(NumericsError::Domain {
                op: self.name(),
                detail: format!("element {i} = {}", data[i]),
            }),
            None => Ok(()),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(NumericsError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let off: usize = index.iter().zip(strides(&self.shape)).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub(crate) fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(NumericsError::AxisOutOfRange {
                op,
                axis,
                rank: self.shape.len(),
            });
        }
        Ok(())
    }

    pub fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(op.name(), &self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
            data[i] = op.apply(self.data[ia], other.data[ib]);
        });
        Ok(Self { shape: out_shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        op.check_domain(&self.data)?;
        Ok(self.map(|v| op.apply(v)))
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Adds `other` into `self`, broadcasting `other` if needed.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape == other.shape {
            self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
            return Ok(());
        }
        *self = self.add(other)?;
        Ok(())
    }

    /// Sums a broadcast result back down to `target` shape.
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let check = broadcast_shape("sum_to_shape", target, &self.shape)?;
        if check != self.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "sum_to_shape",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let st = broadcast_strides(target, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut out = vec![T::zero(); numel(target)];
        for_each_broadcast(&self.shape, &st, &zero, |i, it, _| {
            out[it] = out[it] + self.data[i];
        });
        Ok(Self {
            shape: target.to_vec(),
            data: out,
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape("broadcast_to", &self.shape, shape)?;
        if out != shape {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let sa = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![T::zero(); numel(shape)];
        for_each_broadcast(shape, &sa, &zero, |i, ia, _| data[i] = self.data[ia]);
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis("sum", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis("mean", axis)?;
        if self.shape[axis] == 0 {
            return Err(NumericsError::EmptyAxis { op: "mean", axis });
        }
        let n = T::lit(self.shape[axis] as f64);
        Ok(self.sum_axis(axis)?.map(|v| v / n))
    }

    /// Maximum along `axis` with the winning index (lowest index on ties).
    pub fn max_axis(&self, axis: usize) -> Result<(Self, Vec<usize>)> {
        self.check_axis("max", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if len == 0 {
            return Err(NumericsError::EmptyAxis { op: "max", axis });
        }
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = self.data[o * len * inner + j];
                let mut bi = 0;
                for i in 1..len {
                    let v = self.data[(o * len + i) * inner + j];
                    if v > best {
                        best = v;
                        bi = i;
                    }
                }
                out[o * inner + j] = best;
                arg[o * inner + j] = bi;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok((Self { shape, data: out }, arg))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if len == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax", axis });
        }
        let mut out = self.data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).fold(T::neg_infinity(), |m, i| m.max(self.data[at(i)]));
                let mut z = T::zero();
                for i in 0..len {
                    let e = (self.data[at(i)] - m).exp();
                    out[at(i)] = e;
                    z = z + e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / z;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Standardizes along `axis`; returns the normalized tensor and the
    /// per-slice inverse standard deviations.
    pub fn normalize_axis(&self, axis: usize, eps: T) -> Result<(Self, Vec<T>)> {
        self.check_axis("layer_norm", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if len == 0 {
            return Err(NumericsError::EmptyAxis { op: "layer_norm", axis });
        }
        let n = T::lit(len as f64);
        let mut out = self.data.clone();
        let mut inv = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| self.data[at(i)]).sum::<T>() / n;
                let var = (0..len)
                    .map(|i| {
                        let d = self.data[at(i)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let is = T::one() / (var + eps).sqrt();
                for i in 0..len {
                    out[at(i)] = (self.data[at(i)] - mean) * is;
                }
                inv[o * inner + j] = is;
            }
        }
        Ok((
            Self {
                shape: self.shape.clone(),
                data: out,
            },
            inv,
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::Invalid(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let src = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let zero = vec![0; rank];
        let mut data = vec![T::zero(); self.data.len()];
        for_each_broadcast(&out_shape, &perm_strides, &zero, |i, is, _| {
            data[i] = self.data[is];
        });
        Ok(Self { shape: out_shape, data })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(NumericsError::Invalid("transpose2 needs a matrix".into()));
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat of nothing".into()))?;
        first.check_axis("concat", axis)?;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total_len: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_len;
        Ok(Self { shape, data })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis("narrow", axis)?;
        if start + len > self.shape[axis] {
            return Err(NumericsError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: self.shape[axis],
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        self.check_axis("index_select", axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(NumericsError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                extent: len,
            });
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data })
    }

    /// Scatter-add of `src` rows back into a zero tensor of `shape`; the
    /// adjoint of [`Tensor::index_select`].
    pub(crate) fn index_add(shape: &[usize], axis: usize, indices: &[usize], src: &Self) -> Self {
        let (outer, len, inner) = split_axis(shape, axis);
        let mut data = vec![T::zero(); numel(shape)];
        for o in 0..outer {
            for (k, &i) in indices.iter().enumerate() {
                let dst = (o * len + i) * inner;
                let s = (o * indices.len() + k) * inner;
                for t in 0..inner {
                    data[dst + t] = data[dst + t] + src.data[s + t];
                }
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Pools the last two axes into an `out_h × out_w` grid. Window `i`
    /// along an axis of extent `n` covers `[⌊i·n/o⌋, ⌈(i+1)·n/o⌉)`, which is a
    /// plain non-overlapping `k × k` pool whenever `n = o·k`. Max ties go to
    /// the lowest linear index inside the window.
    pub fn pool2d(&self, out_h: usize, out_w: usize, mode: PoolMode) -> Result<(Self, Vec<usize>)> {
        if self.rank() < 2 {
            return Err(NumericsError::Invalid("pool2d needs rank ≥ 2".into()));
        }
        let r = self.rank();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(NumericsError::EmptyAxis {
                op: "pool2d",
                axis: r - 2,
            });
        }
        let lead = numel(&self.shape[..r - 2]);
        let win = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
        let mut out = Vec::with_capacity(lead * out_h * out_w);
        let mut arg = Vec::new();
        for l in 0..lead {
            let plane = &self.data[l * h * w..(l + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = win(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = win(ox, w, out_w);
                    match mode {
                        PoolMode::Avg => {
                            let mut s = T::zero();
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    s = s + plane[y * w + x];
                                }
                            }
                            out.push(s / T::lit(((y1 - y0) * (x1 - x0)) as f64));
                        }
                        PoolMode::Max => {
                            let mut best = plane[y0 * w + x0];
                            let mut bi = y0 * w + x0;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    if plane[y * w + x] > best {
                                        best = plane[y * w + x];
                                        bi = y * w + x;
                                    }
                                }
                            }
                            out.push(best);
                            arg.push(l * h * w + bi);
                        }
                    }
                }
            }
        }
        let mut shape = self.shape[..r - 2].to_vec();
        shape.extend([out_h, out_w]);
        Ok((Self { shape, data: out }, arg))
    }

    pub(crate) fn pool2d_backward(
        in_shape: &[usize],
        out_h: usize,
        out_w: usize,
        mode: PoolMode,
        argmax: &[usize],
        grad: &Self,
    ) -> Self {
        let r = in_shape.len();
        let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
        let lead = numel(&in_shape[..r - 2]);
        let mut data = vec![T::zero(); numel(in_shape)];
        match mode {
            PoolMode::Max => {
                for (g, &a) in grad.data.iter().zip(argmax) {
                    data[a] = data[a] + *g;
                }
            }
            PoolMode::Avg => {
                let win = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
                for l in 0..lead {
                    for oy in 0..out_h {
                        let (y0, y1) = win(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1) = win(ox, w, out_w);
                            let g = grad.data[(l * out_h + oy) * out_w + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let i = l * h * w + y * w + x;
                                    data[i] = data[i] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Self {
            shape: in_shape.to_vec(),
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_broadcast() {
        let a = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);

        let m = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = m.add(&a).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 4.0, 6.0]);
        let col = Tensor::<f64>::from_f64([2, 1], &[10.0, 20.0]).unwrap();
        assert_eq!(m.add(&col).unwrap().data(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(r.sum_to_shape(&[2]).unwrap().data(), &[6.0, 10.0]);
    }

    #[test]
    fn incompatible_shapes_fail() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2]);
        assert!(matches!(a.add(&b), Err(NumericsError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn unary_values_and_domain() {
        let z = Tensor::<f64>::scalar(0.0);
        assert_eq!(z.unary(UnaryOp::Gelu).unwrap().item(), Some(0.0));
        let two_pi = Tensor::<f64>::scalar(2.0 * std::f64::consts::PI);
        assert!((two_pi.unary(UnaryOp::Cos).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        let neg = Tensor::<f64>::scalar(-1.0);
        assert!(neg.unary(UnaryOp::Sqrt).is_err());
        assert!(neg.unary(UnaryOp::Log).is_err());
        assert!(z.unary(UnaryOp::Log).is_err());
    }

    #[test]
    fn reductions() {
        let ones = Tensor::<f64>::ones([2, 3]);
        assert_eq!(ones.sum_axis(1).unwrap().data(), &[3.0, 3.0]);
        let s = Tensor::<f64>::zeros([3]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (n, _) = Tensor::<f64>::full([4], 2.5).normalize_axis(0, 1e-5).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        let (m, arg) = Tensor::<f64>::from_f64([4], &[1.0, 3.0, 3.0, 0.0])
            .unwrap()
            .max_axis(0)
            .unwrap();
        assert_eq!(m.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
        assert!(Tensor::<f64>::zeros([0]).mean_axis(0).is_err());
        assert!(Tensor::<f64>::zeros([0]).max_axis(0).is_err());
    }

    #[test]
    fn permute_and_select() {
        let t = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = t.index_select(1, &[2, 0]).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 5.0, 3.0]);
        let c = Tensor::concat(&[&t, &s], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 2.0, 0.0, 3.0, 4.0, 5.0, 5.0, 3.0]);
    }

    #[test]
    fn pool_matches_direct_sums() {
        let x = Tensor::<f64>::from_fn([1, 8, 8], |i| (i + 1) as f64);
        let (avg, _) = x.pool2d(1, 1, PoolMode::Avg).unwrap();
        let (max, arg) = x.pool2d(1, 1, PoolMode::Max).unwrap();
        assert_eq!(avg.data(), &[32.5]);
        assert_eq!(max.data(), &[64.0]);
        assert_eq!(arg, vec![63]);

        let c = Tensor::<f64>::full([2, 4, 4], 1.5);
        let (a, _) = c.pool2d(2, 2, PoolMode::Avg).unwrap();
        let (m, arg) = c.pool2d(2, 2, PoolMode::Max).unwrap();
        assert_eq!(a, m);
        // ties resolve to the first element of each window
        assert_eq!(&arg[..4], &[0, 2, 8, 10]);
    }
}
