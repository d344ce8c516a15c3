//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every op records the producing operation on its output when (a) graph
//! recording is enabled on the current thread and (b) some input requires
//! gradients. Graphs are immutable DAGs of `Arc`-shared nodes: a backward
//! pass never mutates the graph, it accumulates cotangents in a side map.
//! Backward rules are themselves expressed with these same ops, so running
//! [`Tensor::backward`] with `create_graph = true` yields gradient tensors
//! that carry graph nodes and can be differentiated again.

mod autograd;
mod op;
#[cfg(test)]
mod tests;

pub mod gradcheck;

pub use autograd::GradientSet;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use op::Op;

/// Stability epsilon: `euclidean_norm` computes `sqrt(sum(v^2) + NORM_EPS)`,
/// and `l2_normalize` divides by `max(norm, NORM_EPS)`.
pub const NORM_EPS: f64 = 1e-12;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor, used to key gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// An n-dimensional f64 value, optionally part of a computation graph.
///
/// Cloning is cheap (shared storage). Tensors are immutable after creation;
/// tensors without a graph node are plain values and are `Send + Sync`.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// A constant tensor. Errors if the shape is empty/zero-sized, the data
    /// length does not match, or any value is non-finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "new",
                expected: "positive dimension sizes",
                got: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "new",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        check_finite(&data, "new")?;
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    /// A scalar constant of shape `[1]`. Panics on non-finite input.
    pub fn scalar(v: f64) -> Tensor {
        assert!(v.is_finite(), "Tensor::scalar: non-finite value");
        Self::raw(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "Tensor::full: invalid shape {shape:?}"
        );
        assert!(v.is_finite(), "Tensor::full: non-finite value");
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; numel], false, None)
    }

    /// Mark this tensor as a differentiation leaf (fresh identity).
    pub fn with_grad(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                node: None,
            }),
        }
    }

    /// A copy sharing storage but cut off from any graph (fresh identity).
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: false,
                node: None,
            }),
        }
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                node,
            }),
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn has_node(&self) -> bool {
        self.inner.node.is_some()
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.shape == [1]
    }

    /// Extract the value of a `[1]` tensor. Panics otherwise.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value(): tensor has shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    // ── Elementwise ops ─────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        op::binary(Op::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        op::binary(Op::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        op::binary(Op::Mul, self, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        op::binary(Op::Div, self, rhs)
    }

    pub fn neg(&self) -> Result<Tensor> {
        op::unary(Op::Neg, self)
    }

    /// Elementwise absolute value. Subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        op::unary(Op::Abs, self)
    }

    /// Elementwise max(v, 0). Subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        op::unary(Op::Relu, self)
    }

    /// Elementwise logistic function, computed in the overflow-free form.
    pub fn sigmoid(&self) -> Result<Tensor> {
        op::unary(Op::Sigmoid, self)
    }

    /// Elementwise square root. The domain is non-negative inputs; negative
    /// entries surface as a `NonFinite` error.
    pub fn sqrt(&self) -> Result<Tensor> {
        op::unary(Op::Sqrt, self)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        op::unary(Op::AddConst(k), self)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        op::unary(Op::Scale(k), self)
    }

    /// Elementwise max(v, k) against a constant. Gradient is 1 where v > k.
    pub fn clamp_min(&self, k: f64) -> Result<Tensor> {
        op::unary(Op::ClampMin(k), self)
    }

    // ── Reductions and broadcasts ───────────────────────────────────

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        op::unary(Op::Sum, self)
    }

    /// Broadcast a `[1]` tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        op::broadcast_scalar(self, shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        op::reshape(self, shape)
    }

    /// `[m,n,c] -> [m,n]`, summing over channels.
    pub fn channel_sum(&self) -> Result<Tensor> {
        op::channel_sum(self)
    }

    /// `[m,n] -> [m,n,c]`, repeating over a new channel axis.
    pub fn channel_broadcast(&self, channels: usize) -> Result<Tensor> {
        op::channel_broadcast(self, channels)
    }

    /// `[m,n,c] -> [c]`, summing over the spatial axes.
    pub fn spatial_sum(&self) -> Result<Tensor> {
        op::spatial_sum(self)
    }

    /// `[c] -> [m,n,c]`, repeating over new spatial axes.
    pub fn spatial_broadcast(&self, m: usize, n: usize) -> Result<Tensor> {
        op::spatial_broadcast(self, m, n)
    }

    /// Maximum element as a `[1]` tensor; gradient routes to the first
    /// occurrence of the maximum.
    pub fn reduce_max(&self) -> Result<Tensor> {
        op::reduce_extremum(self, true)
    }

    /// Minimum element as a `[1]` tensor; first-occurrence gradient routing.
    pub fn reduce_min(&self) -> Result<Tensor> {
        op::reduce_extremum(self, false)
    }

    // ── Composites ──────────────────────────────────────────────────

    /// Inner product of two equal-length vectors, as a `[1]` tensor.
    pub fn dot(&self, rhs: &Tensor) -> Result<Tensor> {
        expect_vector("dot", self)?;
        expect_vector("dot", rhs)?;
        self.mul(rhs)?.sum()
    }

    /// `sqrt(sum(v^2) + 1e-12)`; the epsilon keeps the gradient finite at the
    /// origin.
    pub fn euclidean_norm(&self) -> Result<Tensor> {
        self.mul(self)?.sum()?.add_scalar(NORM_EPS)?.sqrt()
    }

    /// `v / max(||v||, 1e-12)`. The zero vector maps to the zero vector.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        expect_vector("l2_normalize", self)?;
        let denom = self.euclidean_norm()?.clamp_min(NORM_EPS)?;
        self.div(&denom.broadcast_scalar(self.shape())?)
    }

    /// Mean over the spatial dims: `[m,n] -> [1]` or `[m,n,c] -> [c]`.
    pub fn global_average_pool(&self) -> Result<Tensor> {
        let (m, n, flat) = match *self.shape() {
            [m, n] => (m, n, true),
            [m, n, _] => (m, n, false),
            _ => {
                return Err(Error::InvalidShape {
                    op: "global_average_pool",
                    expected: "[m,n] or [m,n,c]",
                    got: self.shape().to_vec(),
                })
            }
        };
        let pooled = if flat {
            self.reshape(&[m, n, 1])?.spatial_sum()?
        } else {
            self.spatial_sum()?
        };
        pooled.scale(1.0 / (m * n) as f64)
    }

    /// Matrix-vector product `w[r,c] * x[c] -> [r]`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        op::matvec(self, x)
    }

    /// Cross-correlation of `input[h,w,c_in]` with `kernels[k,k,c_in,c_out]`.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        op::conv2d(self, kernels, stride, pad)
    }

    /// 2x2 non-overlapping max pooling over `[m,n]` or `[m,n,c]` with even
    /// spatial dims. Gradient routes to the argmax, first index on ties.
    pub fn max_pool2(&self) -> Result<Tensor> {
        op::max_pool2(self)
    }

    /// Corner-aligned bilinear upsampling of an `[m,n]` map to `[h,w]`.
    pub fn upsample_bilinear(&self, h: usize, w: usize) -> Result<Tensor> {
        op::upsample_bilinear(self, h, w)
    }

    /// Min-max rescale to [0,1] as a graph op. A constant map (max == min
    /// within 1e-12) yields a detached all-zero map.
    pub fn minmax_normalize(&self) -> Result<Tensor> {
        let lo = self.reduce_min()?;
        let hi = self.reduce_max()?;
        let range = hi.sub(&lo)?;
        if range.value() < 1e-12 {
            return Ok(Tensor::zeros(self.shape()));
        }
        let shifted = self.sub(&lo.broadcast_scalar(self.shape())?)?;
        shifted.div(&range.broadcast_scalar(self.shape())?)
    }

    // ── Autodiff ────────────────────────────────────────────────────

    /// Reverse-mode gradients of this scalar with respect to every tensor in
    /// its graph. With `create_graph`, the returned gradients carry graph
    /// nodes and support a further backward pass.
    pub fn backward(&self, create_graph: bool) -> Result<GradientSet> {
        autograd::backward(self, create_graph)
    }
}

fn expect_vector(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() == 1 {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op,
            expected: "a vector",
            got: t.shape().to_vec(),
        })
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id.0)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.inner.node.is_some())
            .finish()
    }
}
