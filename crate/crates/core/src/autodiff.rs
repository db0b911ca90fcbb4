//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every backward rule is itself written in terms of graph ops, so gradients
//! produced with `create_graph = true` are ordinary graph nodes and can be
//! differentiated again. That is what makes the one-step-adapted query loss
//! a true second-order objective rather than two first-order passes.
//!
//! Captured constants (relu masks, pooling argmax indices, the row-max shift
//! inside softmax) are the only values treated as locally constant; each is
//! either exactly gradient-neutral or constant almost everywhere.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;
use crate::tensor::{ConvGeom, Result, Tensor, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording for its lifetime (per thread).
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(T),
    MulScalar(T),
    Log,
    Exp,
    Sqrt,
    Recip,
    Matmul,
    Transpose,
    Reshape { from: Vec<usize> },
    BroadcastTo { from: Vec<usize> },
    SumAxes { axes: Vec<usize> },
    Im2col(ConvGeom),
    Col2im(ConvGeom),
    /// `out[i] = in[indices[i]]`; adjoint pair with `Scatter`.
    Gather { indices: Rc<Vec<usize>>, in_shape: Vec<usize> },
    Scatter { indices: Rc<Vec<usize>>, in_shape: Vec<usize> },
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    op: Option<Op<T>>,
}

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents: Vec::new(),
            op: None,
        }))
    }

    /// Leaf that participates in differentiation.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, op: Op<T>) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.0.requires_grad) {
            Var(Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad: true,
                parents,
                op: Some(op),
            }))
        } else {
            Self::leaf(value, false)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// New constant leaf sharing this node's value (stop-gradient).
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        let value = self.0.value.zip(&rhs.0.value, "add", |a, b| a + b)?;
        Ok(Self::from_op(value, vec![self.clone(), rhs.clone()], Op::Add))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        let value = self.0.value.zip(&rhs.0.value, "sub", |a, b| a - b)?;
        Ok(Self::from_op(value, vec![self.clone(), rhs.clone()], Op::Sub))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        let value = self.0.value.zip(&rhs.0.value, "mul", |a, b| a * b)?;
        Ok(Self::from_op(value, vec![self.clone(), rhs.clone()], Op::Mul))
    }

    pub fn div(&self, rhs: &Self) -> Result<Self> {
        let value = self.0.value.zip(&rhs.0.value, "div", |a, b| a / b)?;
        Ok(Self::from_op(value, vec![self.clone(), rhs.clone()], Op::Div))
    }

    pub fn neg(&self) -> Self {
        let value = self.0.value.map(|v| -v);
        Self::from_op(value, vec![self.clone()], Op::Neg)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        let value = self.0.value.map(|v| v + c);
        Self::from_op(value, vec![self.clone()], Op::AddScalar(c))
    }

    pub fn mul_scalar(&self, c: T) -> Self {
        let value = self.0.value.map(|v| v * c);
        Self::from_op(value, vec![self.clone()], Op::MulScalar(c))
    }

    pub fn log(&self) -> Self {
        let value = self.0.value.map(|v| v.ln());
        Self::from_op(value, vec![self.clone()], Op::Log)
    }

    pub fn exp(&self) -> Self {
        let value = self.0.value.map(|v| v.exp());
        Self::from_op(value, vec![self.clone()], Op::Exp)
    }

    pub fn sqrt(&self) -> Self {
        let value = self.0.value.map(|v| v.sqrt());
        Self::from_op(value, vec![self.clone()], Op::Sqrt)
    }

    pub fn recip(&self) -> Self {
        let value = self.0.value.map(|v| T::one() / v);
        Self::from_op(value, vec![self.clone()], Op::Recip)
    }

    /// `max(x, 0)`, realized as a multiply by the 0/1 activity mask so the
    /// backward rule is a plain linear map.
    pub fn relu(&self) -> Self {
        let mask = Self::constant(
            self.0
                .value
                .map(|v| if v > T::zero() { T::one() } else { T::zero() }),
        );
        self.mul(&mask).expect("mask has identical shape")
    }

    // ---- linear algebra / structure ----

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let value = self.0.value.matmul(&rhs.0.value)?;
        Ok(Self::from_op(value, vec![self.clone(), rhs.clone()], Op::Matmul))
    }

    pub fn transpose(&self) -> Result<Self> {
        let value = self.0.value.transpose2d()?;
        Ok(Self::from_op(value, vec![self.clone()], Op::Transpose))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let from = self.shape().to_vec();
        let value = self.0.value.reshape(shape)?;
        Ok(Self::from_op(value, vec![self.clone()], Op::Reshape { from }))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        let from = self.shape().to_vec();
        let value = self.0.value.broadcast_to(target)?;
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::BroadcastTo { from },
        ))
    }

    /// Sum over `axes` with the reduced axes kept as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let value = self.0.value.sum_axes(axes)?;
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::SumAxes { axes: axes.to_vec() },
        ))
    }

    /// Sum of all elements as a rank-0 node.
    pub fn sum_all(&self) -> Result<Self> {
        let nd = self.shape().len();
        let axes: Vec<usize> = (0..nd).collect();
        self.sum_axes(&axes)?.reshape(vec![])
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = T::from_f64(self.0.value.len() as f64);
        Ok(self.sum_all()?.mul_scalar(T::one() / n))
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let reduced: usize = axes.iter().map(|&a| self.shape()[a]).product();
        let n = T::from_f64(reduced as f64);
        Ok(self.sum_axes(axes)?.mul_scalar(T::one() / n))
    }

    pub fn im2col(&self, geom: &ConvGeom) -> Result<Self> {
        let value = self.0.value.im2col(geom)?;
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::Im2col(geom.clone()),
        ))
    }

    pub fn col2im(&self, geom: &ConvGeom) -> Result<Self> {
        let value = self.0.value.col2im(geom)?;
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::Col2im(geom.clone()),
        ))
    }

    fn gather(&self, indices: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Self> {
        let value = self.0.value.gather(&indices, out_shape)?;
        let in_shape = self.shape().to_vec();
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::Gather { indices, in_shape },
        ))
    }

    fn scatter(&self, indices: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Self> {
        let value = self.0.value.scatter_sum(&indices, out_shape.clone())?;
        let in_shape = self.shape().to_vec();
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Op::Scatter { indices, in_shape },
        ))
    }

    /// NHWC max pooling. The argmax indices are captured at forward time, so
    /// the backward rule is the linear scatter through those positions.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Self> {
        let (pooled, indices) = self.0.value.max_pool2d(window, stride)?;
        self.gather(Rc::new(indices), pooled.shape().to_vec())
    }

    // ---- softmax family ----

    /// Numerically stable softmax over the last axis of a 2-D tensor.
    ///
    /// The per-row max is subtracted as a detached constant; softmax is
    /// shift-invariant, so both the values and all derivatives are exact.
    pub fn softmax(&self) -> Result<Self> {
        let shifted = self.shift_by_row_max()?;
        let e = shifted.exp();
        let denom = e.sum_axes(&[1])?.broadcast_to(self.shape())?;
        e.div(&denom)
    }

    /// Log-softmax over the last axis of a 2-D tensor, max-shifted for
    /// stability (see [`Var::softmax`]).
    pub fn log_softmax(&self) -> Result<Self> {
        let shifted = self.shift_by_row_max()?;
        let log_denom = shifted.exp().sum_axes(&[1])?.log();
        shifted.sub(&log_denom.broadcast_to(self.shape())?)
    }

    fn shift_by_row_max(&self) -> Result<Self> {
        if self.shape().len() != 2 {
            return Err(TensorError::Invalid(format!(
                "softmax expects a 2-D tensor, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let data = self.0.value.data();
        let mut maxes = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mut m = row[0];
            for &v in row {
                if v > m {
                    m = v;
                }
            }
            maxes.push(m);
        }
        let shift = Self::constant(Tensor::from_vec(vec![rows, 1], maxes)?);
        self.sub(&shift.broadcast_to(self.shape())?)
    }
}

// ---- network building blocks ----
//
// Composites over the primitives above, so their backward rules (and the
// backward of those) come out of the graph for free.

impl<T: Scalar> Var<T> {
    /// 2-D convolution over NHWC input with "same" padding.
    ///
    /// `weight` is `[k, k, in_c, out_c]`, `bias` is `[out_c]`. Lowered to
    /// im2col + matmul.
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>, stride: usize) -> Result<Self> {
        let in_shape = self.shape();
        if in_shape.len() != 4 || weight.shape().len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: in_shape.to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (k_h, k_w, in_c, out_c) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if k_h != k_w || in_c != in_shape[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: in_shape.to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let geom = ConvGeom::same(in_shape[0], in_shape[1], in_shape[2], in_c, k_h, stride);
        let cols = self.im2col(&geom)?;
        let wmat = weight.reshape(vec![k_h * k_w * in_c, out_c])?;
        let out = cols.matmul(&wmat)?;
        let out = out.add(&bias.broadcast_to(out.shape())?)?;
        out.reshape(vec![geom.batch, geom.out_h, geom.out_w, out_c])
    }

    /// Batch normalization over NHWC input using batch statistics.
    ///
    /// Statistics are functions of the batch in every pass (no running
    /// averages), which keeps the whole block differentiable through the
    /// inner adaptation. Batches of one collapse the variance to zero.
    pub fn batch_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Self> {
        let shape = self.shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid(format!(
                "batch_norm expects NHWC, got {shape:?}"
            )));
        }
        let mu = self.mean_axes(&[0, 1, 2])?;
        let centered = self.sub(&mu.broadcast_to(&shape)?)?;
        let var = centered.mul(&centered)?.mean_axes(&[0, 1, 2])?;
        let inv_std = var.add_scalar(eps).sqrt().recip();
        let normalized = centered.mul(&inv_std.broadcast_to(&shape)?)?;
        normalized
            .mul(&gamma.broadcast_to(&shape)?)?
            .add(&beta.broadcast_to(&shape)?)
    }

    /// Fully connected layer: `x [B, in] x w [in, out] + b [out]`.
    pub fn linear(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Self> {
        let out = self.matmul(weight)?;
        let shape = out.shape().to_vec();
        out.add(&bias.broadcast_to(&shape)?)
    }

    /// Collapses all trailing axes into one: `[B, ...] -> [B, n]`.
    pub fn flatten(&self) -> Result<Self> {
        let b = self.shape()[0];
        let n: usize = self.shape()[1..].iter().product();
        self.reshape(vec![b, n])
    }
}

/// Gradient of a scalar node with respect to `wrt`.
///
/// With `create_graph = true` the returned gradients are graph nodes that can
/// be differentiated again; otherwise they are plain constants. Nodes not
/// reachable from the root get a zero gradient of matching shape.
pub fn grad<T: Scalar>(root: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if root.value().len() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let _guard = if create_graph {
        None
    } else {
        Some(NoGradGuard::new())
    };

    // Reachable differentiable subgraph, then propagate in decreasing-id
    // order (ids are assigned in creation order, so parents precede children).
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.0.requires_grad || !seen.insert(v.0.id) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(root.id(), Var::constant(Tensor::full(root.shape().to_vec(), T::one())));

    for node in &order {
        let Some(g) = grads.remove(&node.0.id) else {
            continue;
        };
        let Some(op) = &node.0.op else {
            // Leaf: keep its accumulated gradient for the caller.
            grads.insert(node.0.id, g);
            continue;
        };
        let contributions = backward_rule(op, &node.0.parents, &g)?;
        for (parent, contrib) in node.0.parents.iter().zip(contributions) {
            let Some(contrib) = contrib else { continue };
            match grads.remove(&parent.0.id) {
                Some(acc) => {
                    grads.insert(parent.0.id, acc.add(&contrib)?);
                }
                None => {
                    grads.insert(parent.0.id, contrib);
                }
            }
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for w in wrt {
        match grads.get(&w.0.id) {
            Some(g) => out.push(g.clone()),
            None => out.push(Var::constant(Tensor::zeros(w.shape().to_vec()))),
        }
    }
    Ok(out)
}

/// Second differentiation pass: gradient of a scalar that was itself built
/// from `grad(..., create_graph = true)` outputs.
pub fn grad_of_grad<T: Scalar>(outer_scalar: &Var<T>, wrt: &[Var<T>]) -> Result<Vec<Var<T>>> {
    grad(outer_scalar, wrt, false)
}

fn backward_rule<T: Scalar>(
    op: &Op<T>,
    parents: &[Var<T>],
    g: &Var<T>,
) -> Result<Vec<Option<Var<T>>>> {
    let needs = |i: usize| parents[i].0.requires_grad;
    Ok(match op {
        Op::Add => vec![
            needs(0).then(|| g.clone()),
            needs(1).then(|| g.clone()),
        ],
        Op::Sub => vec![
            needs(0).then(|| g.clone()),
            needs(1).then(|| g.neg()),
        ],
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                if needs(0) { Some(g.mul(b)?) } else { None },
                if needs(1) { Some(g.mul(a)?) } else { None },
            ]
        }
        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                if needs(0) { Some(g.div(b)?) } else { None },
                if needs(1) {
                    Some(g.mul(a)?.div(&b.mul(b)?)?.neg())
                } else {
                    None
                },
            ]
        }
        Op::Neg => vec![needs(0).then(|| g.neg())],
        Op::AddScalar(_) => vec![needs(0).then(|| g.clone())],
        Op::MulScalar(c) => vec![needs(0).then(|| g.mul_scalar(*c))],
        Op::Log => {
            let a = &parents[0];
            vec![if needs(0) { Some(g.div(a)?) } else { None }]
        }
        Op::Exp => {
            let a = &parents[0];
            vec![if needs(0) { Some(g.mul(&a.exp())?) } else { None }]
        }
        Op::Sqrt => {
            let a = &parents[0];
            vec![if needs(0) {
                Some(g.mul_scalar(T::from_f64(0.5)).div(&a.sqrt())?)
            } else {
                None
            }]
        }
        Op::Recip => {
            let a = &parents[0];
            vec![if needs(0) {
                Some(g.div(&a.mul(a)?)?.neg())
            } else {
                None
            }]
        }
        Op::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                if needs(0) {
                    Some(g.matmul(&b.transpose()?)?)
                } else {
                    None
                },
                if needs(1) {
                    Some(a.transpose()?.matmul(g)?)
                } else {
                    None
                },
            ]
        }
        Op::Transpose => vec![if needs(0) { Some(g.transpose()?) } else { None }],
        Op::Reshape { from } => vec![if needs(0) {
            Some(g.reshape(from.clone())?)
        } else {
            None
        }],
        Op::BroadcastTo { from } => vec![if needs(0) {
            Some(g.sum_to_shape(from)?)
        } else {
            None
        }],
        Op::SumAxes { .. } => {
            let in_shape = parents[0].shape().to_vec();
            vec![if needs(0) {
                Some(g.broadcast_to(&in_shape)?)
            } else {
                None
            }]
        }
        Op::Im2col(geom) => vec![if needs(0) { Some(g.col2im(geom)?) } else { None }],
        Op::Col2im(geom) => vec![if needs(0) { Some(g.im2col(geom)?) } else { None }],
        Op::Gather { indices, in_shape } => vec![if needs(0) {
            Some(g.scatter(indices.clone(), in_shape.clone())?)
        } else {
            None
        }],
        Op::Scatter { indices, in_shape } => vec![if needs(0) {
            Some(g.gather(indices.clone(), in_shape.clone())?)
        } else {
            None
        }],
    })
}

impl<T: Scalar> Var<T> {
    /// Sum over broadcast-expanded axes, returning the pre-broadcast shape.
    fn sum_to_shape(&self, from: &[usize]) -> Result<Self> {
        let nd = self.shape().len();
        let offset = nd - from.len();
        let mut axes = Vec::new();
        for d in 0..nd {
            let f = if d < offset { 1 } else { from[d - offset] };
            if f == 1 && self.shape()[d] != 1 {
                axes.push(d);
            }
        }
        let summed = if axes.is_empty() { self.clone() } else { self.sum_axes(&axes)? };
        summed.reshape(from.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Var<f64> {
        Var::param(Tensor::scalar(v))
    }

    #[test]
    fn grad_of_half_theta_squared() {
        // f = 0.5 * theta^2 at theta = 3 -> df/dtheta = 3.
        let theta = scalar_param(3.0);
        let f = theta.mul(&theta).unwrap().mul_scalar(0.5);
        let g = grad(&f, &[theta.clone()], false).unwrap();
        assert_eq!(g[0].value().item(), 3.0);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let theta = scalar_param(2.0);
        let c = Var::<f64>::scalar(7.0).mul_scalar(1.0);
        let g = grad(&c, &[theta], false).unwrap();
        assert_eq!(g[0].value().item(), 0.0);
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let theta = Var::param(Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap());
        let root = theta.mul_scalar(2.0);
        assert!(matches!(
            grad(&root, &[theta], false),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Var::param(Tensor::from_vec(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap());
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let s = y.sum_all().unwrap();
        let g = grad(&s, &[x], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::param(
            Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap(),
        );
        let s = x.softmax().unwrap();
        for r in 0..2 {
            let total: f64 = s.value().data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_stable() {
        // Large logits must not overflow thanks to the max shift.
        let x = Var::param(Tensor::from_vec(vec![1, 3], vec![1000.0f64, 1001.0, 999.0]).unwrap());
        let s = x.softmax().unwrap();
        assert!(s.value().all_finite());
        let total: f64 = s.value().data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn second_order_through_inner_update() {
        // L_S = 0.5 (theta - a)^2, L_Q = 0.5 (theta - b)^2,
        // theta' = theta - alpha (theta - a)
        // d L_Q(theta') / d theta = (1 - alpha)(theta' - b)
        // theta=0, a=1, b=-1, alpha=0.1 -> 0.99
        let theta = scalar_param(0.0);
        let a = Var::scalar(1.0);
        let b = Var::scalar(-1.0);
        let alpha = 0.1;

        let diff = theta.sub(&a).unwrap();
        let loss_s = diff.mul(&diff).unwrap().mul_scalar(0.5);
        let g_inner = grad(&loss_s, &[theta.clone()], true).unwrap();
        let theta_prime = theta.sub(&g_inner[0].mul_scalar(alpha)).unwrap();

        let diff_q = theta_prime.sub(&b).unwrap();
        let loss_q = diff_q.mul(&diff_q).unwrap().mul_scalar(0.5);
        let meta = grad_of_grad(&loss_q, &[theta]).unwrap();
        assert!((meta[0].value().item() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn first_order_detach_drops_curvature() {
        // Same instance as above but with the inner gradient detached:
        // theta' = theta - alpha * const, so dL_Q/dtheta = theta' - b = 1.1 - 1 = 0.1...
        // with theta=0, a=1, b=-1: theta' = 0.1, theta' - b = 1.1.
        let theta = scalar_param(0.0);
        let a = Var::scalar(1.0);
        let b = Var::scalar(-1.0);

        let diff = theta.sub(&a).unwrap();
        let loss_s = diff.mul(&diff).unwrap().mul_scalar(0.5);
        let g_inner = grad(&loss_s, &[theta.clone()], true).unwrap();
        let theta_prime = theta.sub(&g_inner[0].detach().mul_scalar(0.1)).unwrap();

        let diff_q = theta_prime.sub(&b).unwrap();
        let loss_q = diff_q.mul(&diff_q).unwrap().mul_scalar(0.5);
        let fo = grad(&loss_q, &[theta], false).unwrap();
        assert!((fo[0].value().item() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn linear_inner_loss_makes_orders_agree() {
        // L_S = c * theta has zero Hessian, so the meta-gradient equals the
        // first-order result exactly.
        let run = |first_order: bool| -> f64 {
            let theta = scalar_param(0.7);
            let c = Var::scalar(2.5);
            let loss_s = theta.mul(&c).unwrap();
            let g_inner = grad(&loss_s, &[theta.clone()], true).unwrap();
            let step = if first_order {
                g_inner[0].detach()
            } else {
                g_inner[0].clone()
            };
            let theta_prime = theta.sub(&step.mul_scalar(0.1)).unwrap();
            let loss_q = theta_prime.mul(&theta_prime).unwrap().mul_scalar(0.5);
            grad(&loss_q, &[theta], false).unwrap()[0].value().item()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn no_grad_guard_suppresses_recording() {
        let x = scalar_param(2.0);
        let y = {
            let _g = NoGradGuard::new();
            x.mul(&x).unwrap()
        };
        assert!(!y.requires_grad());
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // f = sum(A B); dA = 1 B^T, dB = A^T 1.
        let a = Var::param(Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let b = Var::param(Tensor::from_vec(vec![2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap());
        let f = a.matmul(&b).unwrap().sum_all().unwrap();
        let gs = grad(&f, &[a, b], false).unwrap();
        assert_eq!(gs[0].value().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(gs[1].value().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let used = scalar_param(1.0);
        let unused = Var::param(Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap());
        let f = used.mul(&used).unwrap();
        let gs = grad(&f, &[used, unused], false).unwrap();
        assert_eq!(gs[1].value().data(), &[0.0, 0.0]);
        assert_eq!(gs[1].shape(), &[2]);
    }
}
