//! Minimal reverse-mode autodiff substrate.
//!
//! A [`Tensor`] is an n-dimensional array (NCHW layout for image-like data)
//! that records a dynamic tape of operations as it is computed. Calling
//! [`Tensor::backward`] on a scalar output propagates gradients to every
//! reachable tensor created with `requires_grad`.
//!
//! The element type is generic over [`Element`] (`f32` or `f64`); gradient
//! check suites run at `f64` to isolate algorithmic errors from rounding.
//! All kernels are bit-deterministic: parallel loops write disjoint output
//! regions and accumulate in a fixed order.

pub mod gradcheck;
pub mod nn;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: &'static str;

    #[inline]
    fn fp(v: f64) -> Self {
        FromPrimitive::from_f64(v).expect("f64 convertible")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("f64 convertible")
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardOp<S> = Box<dyn Fn(&[S])>;

struct Node<S: Element> {
    id: u64,
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardOp<S>>,
}

/// Multi-dimensional array participating in reverse-mode differentiation.
pub struct Tensor<S: Element>(Rc<Node<S>>);

impl<S: Element> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Element> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.0.id, self.0.shape, self.0.requires_grad
        )
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Add `delta` into the gradient slot of `t` (no-op unless it requires grad).
pub(crate) fn accum<S: Element>(t: &Tensor<S>, delta: &[S]) {
    if !t.0.requires_grad {
        return;
    }
    debug_assert_eq!(delta.len(), t.0.values.len());
    let mut slot = t.0.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl<S: Element> Tensor<S> {
    fn new_node(
        shape: Vec<usize>,
        values: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardOp<S>>,
    ) -> Self {
        debug_assert_eq!(values.len(), product(&shape));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    /// Leaf tensor from raw values. Rejects shape/value-count mismatch and
    /// non-finite entries.
    pub fn from_vec(shape: &[usize], values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if values.len() != product(shape) {
            return Err(Error::Shape(format!(
                "{} values for shape {:?} (expected {})",
                values.len(),
                shape,
                product(shape)
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self::new_node(shape.to_vec(), values, false, vec![], None))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: &[usize], values: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, values)?;
        Ok(Self::new_node(t.0.shape.clone(), t.0.values.clone(), true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_node(shape.to_vec(), vec![S::zero(); product(shape)], false, vec![], None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::new_node(shape.to_vec(), vec![v; product(shape)], false, vec![], None)
    }

    pub fn scalar(v: S) -> Self {
        Self::full(&[1], v)
    }

    /// Interior node produced by an operation. Parents and the backward
    /// closure are dropped when no parent requires grad, so evaluation
    /// without parameters does not retain a tape.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S]) + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Self::new_node(shape, values, true, parents, Some(Box::new(backward)))
        } else {
            Self::new_node(shape, values, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.0.values
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.0.values[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Leaf copy sharing no tape with the source.
    /// Fresh grad-requiring leaf holding this tensor's current values.
    pub fn detach_as_param(&self) -> Result<Self> {
        Self::param(self.shape(), self.values().to_vec())
    }

    pub fn detach(&self) -> Self {
        Self::new_node(self.0.shape.clone(), self.0.values.clone(), false, vec![], None)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.0.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    /// Reverse-mode accumulation from a scalar root. Repeated calls without
    /// clearing gradients accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; parent order fixes the traversal, so two
        // runs of the same graph visit nodes identically.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }
        accum(self, &[S::one()]);
        for node in topo.iter().rev() {
            if let Some(backward) = &node.0.backward {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    backward(&g);
                }
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let vals = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            self.0.shape.clone(),
            vals,
            vec![self.clone(), other.clone()],
            move |g| {
                accum(&a, g);
                accum(&b, g);
            },
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let vals = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            self.0.shape.clone(),
            vals,
            vec![self.clone(), other.clone()],
            move |g| {
                accum(&a, g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                accum(&b, &neg);
            },
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let vals = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            self.0.shape.clone(),
            vals,
            vec![self.clone(), other.clone()],
            move |g| {
                let da: Vec<S> = g.iter().zip(b.values()).map(|(&gi, &bi)| gi * bi).collect();
                accum(&a, &da);
                let db: Vec<S> = g.iter().zip(a.values()).map(|(&gi, &ai)| gi * ai).collect();
                accum(&b, &db);
            },
        ))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "div")?;
        let vals = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| a / b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            self.0.shape.clone(),
            vals,
            vec![self.clone(), other.clone()],
            move |g| {
                let da: Vec<S> = g.iter().zip(b.values()).map(|(&gi, &bi)| gi / bi).collect();
                accum(&a, &da);
                let db: Vec<S> = g
                    .iter()
                    .zip(a.values().iter().zip(b.values()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                accum(&b, &db);
            },
        ))
    }

    // ---- elementwise unary ----

    fn unary(&self, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + 'static) -> Self {
        let vals: Vec<S> = self.values().iter().map(|&x| f(x)).collect();
        let saved = vals.clone();
        let a = self.clone();
        Self::from_op(self.0.shape.clone(), vals, vec![self.clone()], move |g| {
            let delta: Vec<S> = g
                .iter()
                .zip(a.values().iter().zip(saved.iter()))
                .map(|(&gi, (&x, &y))| gi * df(x, y))
                .collect();
            accum(&a, &delta);
        })
    }

    pub fn neg(&self) -> Self {
        self.unary(|x| -x, |_, _| -S::one())
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&self) -> Self {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn exp(&self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn reciprocal(&self) -> Self {
        self.unary(|x| S::one() / x, |_, y| -y * y)
    }

    pub fn relu(&self) -> Self {
        self.unary(
            |x| x.max(S::zero()),
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn elu(&self) -> Self {
        self.unary(
            |x| if x > S::zero() { x } else { x.exp() - S::one() },
            |x, y| if x > S::zero() { S::one() } else { y + S::one() },
        )
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(
            |x| S::one() / (S::one() + (-x).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = S::fp(c);
        self.unary(|x| x + c, |_, _| S::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Self {
        let c = S::fp(c);
        self.unary(|x| x * c, move |_, _| c)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Self {
        let total: S = self.values().iter().copied().sum();
        let a = self.clone();
        Self::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            let delta = vec![g[0]; a.len()];
            accum(&a, &delta);
        })
    }

    pub fn mean_all(&self) -> Self {
        let n = self.len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "mean_axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape();
        let outer = product(&shape[..axis]);
        let extent = shape[axis];
        let inner = product(&shape[axis + 1..]);
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let inv = S::fp(1.0 / extent as f64);
        let mut vals = vec![S::zero(); outer * inner];
        let x = self.values();
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    vals[obase + i] = vals[obase + i] + x[base + i];
                }
            }
        }
        for v in &mut vals {
            *v = *v * inv;
        }
        let a = self.clone();
        Ok(Self::from_op(out_shape, vals, vec![self.clone()], move |g| {
            let mut delta = vec![S::zero(); a.len()];
            for o in 0..outer {
                for k in 0..extent {
                    let base = (o * extent + k) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        delta[base + i] = g[obase + i] * inv;
                    }
                }
            }
            accum(&a, &delta);
        }))
    }

    /// Softmax normalization along `axis`; outputs sum to 1 along that axis.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape();
        let outer = product(&shape[..axis]);
        let extent = shape[axis];
        let inner = product(&shape[axis + 1..]);
        let x = self.values();
        let mut vals = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let mut m = x[idx(0)];
                for k in 1..extent {
                    m = m.max(x[idx(k)]);
                }
                let mut sum = S::zero();
                for k in 0..extent {
                    let e = (x[idx(k)] - m).exp();
                    vals[idx(k)] = e;
                    sum = sum + e;
                }
                for k in 0..extent {
                    vals[idx(k)] = vals[idx(k)] / sum;
                }
            }
        }
        let saved = vals.clone();
        let a = self.clone();
        Ok(Self::from_op(shape.to_vec(), vals, vec![self.clone()], move |g| {
            let mut delta = vec![S::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * extent + k) * inner + i;
                    let mut dot = S::zero();
                    for k in 0..extent {
                        dot = dot + g[idx(k)] * saved[idx(k)];
                    }
                    for k in 0..extent {
                        delta[idx(k)] = saved[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            accum(&a, &delta);
        }))
    }

    // ---- structure ----

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        if product(new_shape) != self.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                new_shape
            )));
        }
        let a = self.clone();
        Ok(Self::from_op(
            new_shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            move |g| accum(&a, g),
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(axis: usize, parts: &[Tensor<S>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of empty set".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total_extent = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            total_extent += s[axis];
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = total_extent;
        let outer = product(&first[..axis]);
        let inner = product(&first[axis + 1..]);
        let mut vals = vec![S::zero(); outer * total_extent * inner];
        let mut offset = 0usize;
        for p in parts {
            let e = p.shape()[axis];
            let x = p.values();
            for o in 0..outer {
                let src = o * e * inner;
                let dst = (o * total_extent + offset) * inner;
                vals[dst..dst + e * inner].copy_from_slice(&x[src..src + e * inner]);
            }
            offset += e;
        }
        let saved: Vec<Tensor<S>> = parts.to_vec();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Self::from_op(out_shape, vals, parts.to_vec(), move |g| {
            let mut offset = 0usize;
            for (p, &e) in saved.iter().zip(&extents) {
                let mut delta = vec![S::zero(); p.len()];
                for o in 0..outer {
                    let dst = o * e * inner;
                    let src = (o * total_extent + offset) * inner;
                    delta[dst..dst + e * inner].copy_from_slice(&g[src..src + e * inner]);
                }
                accum(p, &delta);
                offset += e;
            }
        }))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow(axis={axis}, start={start}, len={len}) on shape {shape:?}"
            )));
        }
        let outer = product(&shape[..axis]);
        let extent = shape[axis];
        let inner = product(&shape[axis + 1..]);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut vals = vec![S::zero(); outer * len * inner];
        let x = self.values();
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            let dst = o * len * inner;
            vals[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
        }
        let a = self.clone();
        Ok(Self::from_op(out_shape, vals, vec![self.clone()], move |g| {
            let mut delta = vec![S::zero(); a.len()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                delta[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accum(&a, &delta);
        }))
    }

    /// Select flat coordinates into a 1-D tensor; gradients scatter-add
    /// back, so repeated indices are allowed.
    pub fn index_select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("index_select with empty index set".into()));
        }
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for tensor of {n} elements"
            )));
        }
        let vals: Vec<S> = indices.iter().map(|&i| self.values()[i]).collect();
        let idx = indices.to_vec();
        let a = self.clone();
        Ok(Self::from_op(vec![indices.len()], vals, vec![self.clone()], move |g| {
            let mut delta = vec![S::zero(); a.len()];
            for (j, &i) in idx.iter().enumerate() {
                delta[i] = delta[i] + g[j];
            }
            accum(&a, &delta);
        }))
    }

    /// Per-pixel minimum over a set of same-shape maps. Gradient routes to
    /// the selected input only; ties go to the first input.
    pub fn per_pixel_min(inputs: &[Tensor<S>]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("per_pixel_min of empty set".into()));
        }
        let shape = inputs[0].shape().to_vec();
        for t in &inputs[1..] {
            inputs[0].check_same_shape(t, "per_pixel_min")?;
        }
        let n = inputs[0].len();
        let mut vals = inputs[0].values().to_vec();
        let mut argmin = vec![0u16; n];
        for (k, t) in inputs.iter().enumerate().skip(1) {
            for (i, &v) in t.values().iter().enumerate() {
                if v < vals[i] {
                    vals[i] = v;
                    argmin[i] = k as u16;
                }
            }
        }
        let saved: Vec<Tensor<S>> = inputs.to_vec();
        Ok(Self::from_op(shape, vals, inputs.to_vec(), move |g| {
            for (k, t) in saved.iter().enumerate() {
                let mut delta = vec![S::zero(); n];
                let mut any = false;
                for i in 0..n {
                    if argmin[i] == k as u16 {
                        delta[i] = g[i];
                        any = true;
                    }
                }
                if any {
                    accum(t, &delta);
                }
            }
        }))
    }

    /// Multiply each channel of an NCHW tensor by a fixed per-channel
    /// constant (no gradient to the constants).
    pub fn scale_channels(&self, scales: &[S]) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "scale_channels expects NCHW, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if scales.len() != c {
            return Err(Error::Shape(format!(
                "scale_channels: {} scales for {c} channels",
                scales.len()
            )));
        }
        let plane = h * w;
        let x = self.values();
        let mut vals = vec![S::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let s = scales[ci];
                for i in 0..plane {
                    vals[base + i] = x[base + i] * s;
                }
            }
        }
        let a = self.clone();
        let scales = scales.to_vec();
        Ok(Self::from_op(shape.to_vec(), vals, vec![self.clone()], move |g| {
            let mut delta = vec![S::zero(); a.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let s = scales[ci];
                    for i in 0..plane {
                        delta[base + i] = g[base + i] * s;
                    }
                }
            }
            accum(&a, &delta);
        }))
    }

    /// Multiply by a one-element tensor, with gradient to both operands.
    pub fn scale_by_scalar(&self, s: &Tensor<S>) -> Result<Self> {
        if s.len() != 1 {
            return Err(Error::Shape(format!(
                "scale_by_scalar expects a one-element scale, got {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let vals = self.values().iter().map(|&x| x * sv).collect();
        let (a, b) = (self.clone(), s.clone());
        Ok(Self::from_op(
            self.0.shape.clone(),
            vals,
            vec![self.clone(), s.clone()],
            move |g| {
                let da: Vec<S> = g.iter().map(|&gi| gi * sv).collect();
                accum(&a, &da);
                let ds: S = g.iter().zip(a.values()).map(|(&gi, &ai)| gi * ai).sum();
                accum(&b, &[ds]);
            },
        ))
    }
}
