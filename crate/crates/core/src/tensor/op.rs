//! Operation kernels and their backward rules.
//!
//! Each op's backward rule is written in terms of the public tensor ops, so
//! gradients are ordinary graph tensors. Ops whose adjoint is not expressible
//! through existing ops come in mutually-adjoint groups (conv2d with its two
//! gradient kernels, scatter/gather, upsample and its transpose), which keeps
//! the op set closed under differentiation to any order.

use std::sync::Arc;

use super::{check_finite, Node, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Relu,
    Sigmoid,
    Sqrt,
    AddConst(f64),
    Scale(f64),
    ClampMin(f64),
    Sum,
    BroadcastScalar,
    Reshape,
    ChannelSum,
    ChannelBroadcast,
    SpatialSum,
    SpatialBroadcast,
    MatVec,
    MatVecT,
    Outer,
    Conv2d(ConvGeom),
    ConvGradInput(ConvGeom),
    ConvGradKernels(ConvGeom),
    MaxPool2 { argmax: Arc<Vec<usize>> },
    ScatterIdx { idx: Arc<Vec<usize>> },
    GatherIdx { idx: Arc<Vec<usize>> },
    ReduceMax { arg: usize },
    ReduceMin { arg: usize },
    UpsampleBilinear,
    UpsampleAdjoint,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::AddConst(_) => "add_scalar",
            Op::Scale(_) => "scale",
            Op::ClampMin(_) => "clamp_min",
            Op::Sum => "sum",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::Reshape => "reshape",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast => "channel_broadcast",
            Op::SpatialSum => "spatial_sum",
            Op::SpatialBroadcast => "spatial_broadcast",
            Op::MatVec => "matvec",
            Op::MatVecT => "matvec_t",
            Op::Outer => "outer",
            Op::Conv2d(_) => "conv2d",
            Op::ConvGradInput(_) => "conv2d_grad_input",
            Op::ConvGradKernels(_) => "conv2d_grad_kernels",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::ScatterIdx { .. } => "scatter_idx",
            Op::GatherIdx { .. } => "gather_idx",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceMin { .. } => "reduce_min",
            Op::UpsampleBilinear => "upsample_bilinear",
            Op::UpsampleAdjoint => "upsample_adjoint",
        }
    }

    /// Cotangents for each input given the output cotangent. Entries are
    /// `None` where the caller signalled the gradient is not needed.
    pub(crate) fn vjp(
        &self,
        cot: &Tensor,
        inputs: &[Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Add => Ok(vec![
                need(0).then(|| cot.clone()),
                need(1).then(|| cot.clone()),
            ]),
            Op::Sub => Ok(vec![
                need(0).then(|| cot.clone()),
                if need(1) { Some(cot.neg()?) } else { None },
            ]),
            Op::Mul => {
                let a = if need(0) { Some(cot.mul(&inputs[1])?) } else { None };
                let b = if need(1) { Some(cot.mul(&inputs[0])?) } else { None };
                Ok(vec![a, b])
            }
            Op::Div => {
                // y = a/b: da = c/b, db = -c*y/b
                let a = if need(0) { Some(cot.div(&inputs[1])?) } else { None };
                let b = if need(1) {
                    Some(cot.mul(output)?.div(&inputs[1])?.neg()?)
                } else {
                    None
                };
                Ok(vec![a, b])
            }
            Op::Neg => Ok(vec![if need(0) { Some(cot.neg()?) } else { None }]),
            Op::Abs => {
                // Subgradient 0 at 0: mask is sign(x), a constant of the graph.
                let mask: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                grad_through_mask(cot, inputs[0].shape(), mask, need(0))
            }
            Op::Relu => {
                let mask: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                grad_through_mask(cot, inputs[0].shape(), mask, need(0))
            }
            Op::Sigmoid => {
                if !need(0) {
                    return Ok(vec![None]);
                }
                // sigma' = y(1-y), expressed via the graph output for
                // second-order correctness.
                let one_minus = output.neg()?.add_scalar(1.0)?;
                Ok(vec![Some(cot.mul(output)?.mul(&one_minus)?)])
            }
            Op::Sqrt => {
                if !need(0) {
                    return Ok(vec![None]);
                }
                Ok(vec![Some(cot.div(&output.scale(2.0)?)?)])
            }
            Op::AddConst(_) => Ok(vec![need(0).then(|| cot.clone())]),
            Op::Scale(k) => Ok(vec![if need(0) { Some(cot.scale(*k)?) } else { None }]),
            Op::ClampMin(k) => {
                let mask: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .map(|&v| if v > *k { 1.0 } else { 0.0 })
                    .collect();
                grad_through_mask(cot, inputs[0].shape(), mask, need(0))
            }
            Op::Sum => Ok(vec![if need(0) {
                Some(cot.broadcast_scalar(inputs[0].shape())?)
            } else {
                None
            }]),
            Op::BroadcastScalar => Ok(vec![if need(0) { Some(cot.sum()?) } else { None }]),
            Op::Reshape => Ok(vec![if need(0) {
                Some(cot.reshape(inputs[0].shape())?)
            } else {
                None
            }]),
            Op::ChannelSum => {
                let c = inputs[0].shape()[2];
                Ok(vec![if need(0) {
                    Some(cot.channel_broadcast(c)?)
                } else {
                    None
                }])
            }
            Op::ChannelBroadcast => Ok(vec![if need(0) {
                Some(cot.channel_sum()?)
            } else {
                None
            }]),
            Op::SpatialSum => {
                let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                Ok(vec![if need(0) {
                    Some(cot.spatial_broadcast(m, n)?)
                } else {
                    None
                }])
            }
            Op::SpatialBroadcast => Ok(vec![if need(0) {
                Some(cot.spatial_sum()?)
            } else {
                None
            }]),
            Op::MatVec => {
                // y = W x: dW = c ⊗ x, dx = W^T c
                let w = if need(0) { Some(outer(cot, &inputs[1])?) } else { None };
                let x = if need(1) { Some(matvec_t(&inputs[0], cot)?) } else { None };
                Ok(vec![w, x])
            }
            Op::MatVecT => {
                // u = W^T y: dW = y ⊗ c, dy = W c
                let w = if need(0) { Some(outer(&inputs[1], cot)?) } else { None };
                let y = if need(1) { Some(matvec(&inputs[0], cot)?) } else { None };
                Ok(vec![w, y])
            }
            Op::Outer => {
                // T = u ⊗ v: du = C v, dv = C^T u
                let u = if need(0) { Some(matvec(cot, &inputs[1])?) } else { None };
                let v = if need(1) { Some(matvec_t(cot, &inputs[0])?) } else { None };
                Ok(vec![u, v])
            }
            Op::Conv2d(geom) => {
                let (x, k) = (&inputs[0], &inputs[1]);
                let gx = if need(0) {
                    Some(conv_grad_input(cot, k, *geom, x.shape()[0], x.shape()[1])?)
                } else {
                    None
                };
                let gk = if need(1) {
                    Some(conv_grad_kernels(x, cot, *geom)?)
                } else {
                    None
                };
                Ok(vec![gx, gk])
            }
            Op::ConvGradInput(geom) => {
                // out = B*_x(g, k); cotangent c is input-shaped.
                let (g, k) = (&inputs[0], &inputs[1]);
                let gg = if need(0) { Some(conv2d(cot, k, geom.stride, geom.pad)?) } else { None };
                let gk = if need(1) { Some(conv_grad_kernels(cot, g, *geom)?) } else { None };
                Ok(vec![gg, gk])
            }
            Op::ConvGradKernels(geom) => {
                // out = B*_k(x, g); cotangent c is kernel-shaped.
                let (x, g) = (&inputs[0], &inputs[1]);
                let gx = if need(0) {
                    Some(conv_grad_input(g, cot, *geom, x.shape()[0], x.shape()[1])?)
                } else {
                    None
                };
                let gg = if need(1) { Some(conv2d(x, cot, geom.stride, geom.pad)?) } else { None };
                Ok(vec![gx, gg])
            }
            Op::MaxPool2 { argmax } => Ok(vec![if need(0) {
                Some(scatter_idx(cot, argmax.clone(), inputs[0].shape())?)
            } else {
                None
            }]),
            Op::ScatterIdx { idx } => Ok(vec![if need(0) {
                let flat = gather_idx(cot, idx.clone())?;
                Some(flat.reshape(inputs[0].shape())?)
            } else {
                None
            }]),
            Op::GatherIdx { idx } => Ok(vec![if need(0) {
                Some(scatter_idx(cot, idx.clone(), inputs[0].shape())?)
            } else {
                None
            }]),
            Op::ReduceMax { arg } | Op::ReduceMin { arg } => Ok(vec![if need(0) {
                Some(scatter_idx(cot, Arc::new(vec![*arg]), inputs[0].shape())?)
            } else {
                None
            }]),
            Op::UpsampleBilinear => {
                let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                Ok(vec![if need(0) {
                    Some(upsample_adjoint(cot, m, n)?)
                } else {
                    None
                }])
            }
            Op::UpsampleAdjoint => {
                let (h, w) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                Ok(vec![if need(0) {
                    Some(upsample_bilinear(cot, h, w)?)
                } else {
                    None
                }])
            }
        }
    }
}

fn grad_through_mask(
    cot: &Tensor,
    shape: &[usize],
    mask: Vec<f64>,
    needed: bool,
) -> Result<Vec<Option<Tensor>>> {
    if !needed {
        return Ok(vec![None]);
    }
    let mask = Tensor::new(shape, mask)?;
    Ok(vec![Some(cot.mul(&mask)?)])
}

/// Build an op output, attaching a graph node when recording is on and some
/// input requires gradients.
fn from_op(op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    check_finite(&data, op.name())?;
    let track = super::autograd::graph_enabled() && inputs.iter().any(Tensor::requires_grad);
    let node = track.then_some(Node { op, inputs });
    Ok(Tensor::raw(shape, data, track, node))
}

// ── Elementwise ─────────────────────────────────────────────────────

pub(super) fn binary(op: Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = match op {
        Op::Add => x.iter().zip(y).map(|(u, v)| u + v).collect(),
        Op::Sub => x.iter().zip(y).map(|(u, v)| u - v).collect(),
        Op::Mul => x.iter().zip(y).map(|(u, v)| u * v).collect(),
        Op::Div => x.iter().zip(y).map(|(u, v)| u / v).collect(),
        _ => unreachable!("not a binary op"),
    };
    from_op(op, vec![a.clone(), b.clone()], a.shape().to_vec(), data)
}

pub(super) fn unary(op: Op, t: &Tensor) -> Result<Tensor> {
    let x = t.data();
    let data: Vec<f64> = match op {
        Op::Neg => x.iter().map(|v| -v).collect(),
        Op::Abs => x.iter().map(|v| v.abs()).collect(),
        Op::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        Op::Sigmoid => x.iter().map(|&v| stable_sigmoid(v)).collect(),
        Op::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
        Op::AddConst(k) => x.iter().map(|v| v + k).collect(),
        Op::Scale(k) => x.iter().map(|v| v * k).collect(),
        Op::ClampMin(k) => x.iter().map(|v| v.max(k)).collect(),
        Op::Sum => vec![x.iter().sum()],
        _ => unreachable!("not a unary op"),
    };
    let shape = if matches!(op, Op::Sum) {
        vec![1]
    } else {
        t.shape().to_vec()
    };
    from_op(op, vec![t.clone()], shape, data)
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ── Broadcasts, reshapes, reductions ────────────────────────────────

pub(super) fn broadcast_scalar(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !t.is_scalar() {
        return Err(Error::InvalidShape {
            op: "broadcast_scalar",
            expected: "shape [1]",
            got: t.shape().to_vec(),
        });
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            op: "broadcast_scalar",
            expected: "positive dimension sizes",
            got: shape.to_vec(),
        });
    }
    let numel = shape.iter().product();
    let data = vec![t.data()[0]; numel];
    from_op(Op::BroadcastScalar, vec![t.clone()], shape.to_vec(), data)
}

pub(super) fn reshape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != t.numel() {
        return Err(Error::InvalidShape {
            op: "reshape",
            expected: "same element count",
            got: shape.to_vec(),
        });
    }
    from_op(Op::Reshape, vec![t.clone()], shape.to_vec(), t.data().to_vec())
}

fn expect_3d(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [m, n, c] => Ok((m, n, c)),
        _ => Err(Error::InvalidShape {
            op,
            expected: "[m,n,c]",
            got: t.shape().to_vec(),
        }),
    }
}

pub(super) fn channel_sum(t: &Tensor) -> Result<Tensor> {
    let (m, n, c) = expect_3d("channel_sum", t)?;
    let x = t.data();
    let mut data = vec![0.0; m * n];
    for (i, out) in data.iter_mut().enumerate() {
        let base = i * c;
        *out = x[base..base + c].iter().sum();
    }
    from_op(Op::ChannelSum, vec![t.clone()], vec![m, n], data)
}

pub(super) fn channel_broadcast(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (m, n) = match *t.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(Error::InvalidShape {
                op: "channel_broadcast",
                expected: "[m,n]",
                got: t.shape().to_vec(),
            })
        }
    };
    if channels == 0 {
        return Err(Error::InvalidArgument {
            op: "channel_broadcast",
            msg: "channels must be positive".into(),
        });
    }
    let x = t.data();
    let mut data = vec![0.0; m * n * channels];
    for i in 0..m * n {
        data[i * channels..(i + 1) * channels].fill(x[i]);
    }
    from_op(Op::ChannelBroadcast, vec![t.clone()], vec![m, n, channels], data)
}

pub(super) fn spatial_sum(t: &Tensor) -> Result<Tensor> {
    let (m, n, c) = expect_3d("spatial_sum", t)?;
    let x = t.data();
    let mut data = vec![0.0; c];
    for i in 0..m * n {
        for k in 0..c {
            data[k] += x[i * c + k];
        }
    }
    from_op(Op::SpatialSum, vec![t.clone()], vec![c], data)
}

pub(super) fn spatial_broadcast(t: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    let c = match *t.shape() {
        [c] => c,
        _ => {
            return Err(Error::InvalidShape {
                op: "spatial_broadcast",
                expected: "[c]",
                got: t.shape().to_vec(),
            })
        }
    };
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument {
            op: "spatial_broadcast",
            msg: "spatial dims must be positive".into(),
        });
    }
    let x = t.data();
    let mut data = vec![0.0; m * n * c];
    for i in 0..m * n {
        data[i * c..(i + 1) * c].copy_from_slice(x);
    }
    from_op(Op::SpatialBroadcast, vec![t.clone()], vec![m, n, c], data)
}

pub(super) fn reduce_extremum(t: &Tensor, max: bool) -> Result<Tensor> {
    let x = t.data();
    let mut arg = 0usize;
    let mut best = x[0];
    for (i, &v) in x.iter().enumerate().skip(1) {
        if (max && v > best) || (!max && v < best) {
            best = v;
            arg = i;
        }
    }
    let op = if max { Op::ReduceMax { arg } } else { Op::ReduceMin { arg } };
    from_op(op, vec![t.clone()], vec![1], vec![best])
}

// ── Linear algebra ──────────────────────────────────────────────────

pub(super) fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix_vec("matvec", w, x)?;
    let (wd, xd) = (w.data(), x.data());
    let data: Vec<f64> = (0..r)
        .map(|i| {
            wd[i * c..(i + 1) * c]
                .iter()
                .zip(xd)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    from_op(Op::MatVec, vec![w.clone(), x.clone()], vec![r], data)
}

fn matvec_t(w: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (r, c) = match *w.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "matvec_t",
                expected: "[r,c]",
                got: w.shape().to_vec(),
            })
        }
    };
    if y.shape() != [r] {
        return Err(Error::ShapeMismatch {
            op: "matvec_t",
            lhs: w.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (wd, yd) = (w.data(), y.data());
    let mut data = vec![0.0; c];
    for i in 0..r {
        let row = &wd[i * c..(i + 1) * c];
        let yi = yd[i];
        for (o, a) in data.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
    from_op(Op::MatVecT, vec![w.clone(), y.clone()], vec![c], data)
}

fn outer(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (r, c) = match (u.shape(), v.shape()) {
        ([r], [c]) => (*r, *c),
        _ => {
            return Err(Error::InvalidShape {
                op: "outer",
                expected: "two vectors",
                got: u.shape().to_vec(),
            })
        }
    };
    let (ud, vd) = (u.data(), v.data());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] = ud[i] * vd[j];
        }
    }
    from_op(Op::Outer, vec![u.clone(), v.clone()], vec![r, c], data)
}

fn expect_matrix_vec(op: &'static str, w: &Tensor, x: &Tensor) -> Result<(usize, usize)> {
    let (r, c) = match *w.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(Error::InvalidShape {
                op,
                expected: "[r,c]",
                got: w.shape().to_vec(),
            })
        }
    };
    if x.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok((r, c))
}

// ── Convolution ─────────────────────────────────────────────────────

struct ConvShapes {
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
}

fn conv_shapes(input: &[usize], kernels: &[usize], geom: ConvGeom) -> Result<ConvShapes> {
    let (h, w, c_in) = match *input {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                expected: "input [h,w,c_in]",
                got: input.to_vec(),
            })
        }
    };
    let (k1, k2, kc_in, c_out) = match *kernels {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                expected: "kernels [k,k,c_in,c_out]",
                got: kernels.to_vec(),
            })
        }
    };
    if k1 != k2 || kc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernels.to_vec(),
        });
    }
    if geom.stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    let fits = |dim: usize| -> Result<usize> {
        let padded = dim + 2 * geom.pad;
        if padded < k1 || (padded - k1) % geom.stride != 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "spatial dim {} with pad {} and stride {} does not fit kernel {}",
                    dim, geom.pad, geom.stride, k1
                ),
            });
        }
        Ok((padded - k1) / geom.stride + 1)
    };
    let oh = fits(h)?;
    let ow = fits(w)?;
    Ok(ConvShapes { h, w, c_in, k: k1, c_out, oh, ow })
}

pub(super) fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeom { stride, pad };
    let s = conv_shapes(input.shape(), kernels.shape(), geom)?;
    let (x, ker) = (input.data(), kernels.data());
    let mut out = vec![0.0; s.oh * s.ow * s.c_out];
    for oy in 0..s.oh {
        for ox in 0..s.ow {
            let obase = (oy * s.ow + ox) * s.c_out;
            for dy in 0..s.k {
                let iy = (oy * stride + dy) as isize - pad as isize;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for dx in 0..s.k {
                    let ix = (ox * stride + dx) as isize - pad as isize;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * s.w + ix as usize) * s.c_in;
                    let kbase = (dy * s.k + dx) * s.c_in * s.c_out;
                    for ci in 0..s.c_in {
                        let a = x[ibase + ci];
                        let krow = &ker[kbase + ci * s.c_out..kbase + (ci + 1) * s.c_out];
                        let orow = &mut out[obase..obase + s.c_out];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
    from_op(
        Op::Conv2d(geom),
        vec![input.clone(), kernels.clone()],
        vec![s.oh, s.ow, s.c_out],
        out,
    )
}

fn conv_grad_input(
    grad: &Tensor,
    kernels: &Tensor,
    geom: ConvGeom,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let (k, c_in, c_out) = match *kernels.shape() {
        [k, k2, ci, co] if k == k2 => (k, ci, co),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d_grad_input",
                expected: "kernels [k,k,c_in,c_out]",
                got: kernels.shape().to_vec(),
            })
        }
    };
    let (oh, ow) = match *grad.shape() {
        [oh, ow, co] if co == c_out => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d_grad_input",
                lhs: grad.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            })
        }
    };
    let (g, ker) = (grad.data(), kernels.data());
    let mut out = vec![0.0; in_h * in_w * c_in];
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * c_out;
            let grow = &g[gbase..gbase + c_out];
            for dy in 0..k {
                let iy = (oy * geom.stride + dy) as isize - geom.pad as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for dx in 0..k {
                    let ix = (ox * geom.stride + dx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * in_w + ix as usize) * c_in;
                    let kbase = (dy * k + dx) * c_in * c_out;
                    for ci in 0..c_in {
                        let krow = &ker[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                        let mut acc = 0.0;
                        for (gv, kv) in grow.iter().zip(krow) {
                            acc += gv * kv;
                        }
                        out[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    from_op(
        Op::ConvGradInput(geom),
        vec![grad.clone(), kernels.clone()],
        vec![in_h, in_w, c_in],
        out,
    )
}

fn conv_grad_kernels(input: &Tensor, grad: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (h, w, c_in) = match *input.shape() {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d_grad_kernels",
                expected: "input [h,w,c_in]",
                got: input.shape().to_vec(),
            })
        }
    };
    let (oh, ow, c_out) = match *grad.shape() {
        [oh, ow, co] => (oh, ow, co),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d_grad_kernels",
                expected: "grad [oh,ow,c_out]",
                got: grad.shape().to_vec(),
            })
        }
    };
    // Kernel extent recovered from the output/input geometry.
    let k = h + 2 * geom.pad - (oh - 1) * geom.stride;
    if k == 0 || k > h + 2 * geom.pad || w + 2 * geom.pad < (ow - 1) * geom.stride {
        return Err(Error::InvalidArgument {
            op: "conv2d_grad_kernels",
            msg: "inconsistent geometry".into(),
        });
    }
    let (x, g) = (input.data(), grad.data());
    let mut out = vec![0.0; k * k * c_in * c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * c_out;
            let grow = &g[gbase..gbase + c_out];
            for dy in 0..k {
                let iy = (oy * geom.stride + dy) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let ix = (ox * geom.stride + dx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * c_in;
                    let kbase = (dy * k + dx) * c_in * c_out;
                    for ci in 0..c_in {
                        let a = x[ibase + ci];
                        let orow = &mut out[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += a * gv;
                        }
                    }
                }
            }
        }
    }
    from_op(
        Op::ConvGradKernels(geom),
        vec![input.clone(), grad.clone()],
        vec![k, k, c_in, c_out],
        out,
    )
}

// ── Pooling ─────────────────────────────────────────────────────────

pub(super) fn max_pool2(t: &Tensor) -> Result<Tensor> {
    let (m, n, c, flat) = match *t.shape() {
        [m, n] => (m, n, 1, true),
        [m, n, c] => (m, n, c, false),
        _ => {
            return Err(Error::InvalidShape {
                op: "max_pool2",
                expected: "[m,n] or [m,n,c]",
                got: t.shape().to_vec(),
            })
        }
    };
    if m % 2 != 0 || n % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool2",
            expected: "even spatial dims",
            got: t.shape().to_vec(),
        });
    }
    let x = t.data();
    let (om, on) = (m / 2, n / 2);
    let mut out = vec![0.0; om * on * c];
    let mut argmax = vec![0usize; om * on * c];
    for oy in 0..om {
        for ox in 0..on {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                // Window scan order fixes the tie rule: first index wins.
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * oy + dy) * n + (2 * ox + dx)) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            arg = idx;
                        }
                    }
                }
                let oidx = (oy * on + ox) * c + ch;
                out[oidx] = best;
                argmax[oidx] = arg;
            }
        }
    }
    let shape = if flat { vec![om, on] } else { vec![om, on, c] };
    from_op(
        Op::MaxPool2 { argmax: Arc::new(argmax) },
        vec![t.clone()],
        shape,
        out,
    )
}

fn scatter_idx(src: &Tensor, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
    if src.numel() != idx.len() {
        return Err(Error::InvalidArgument {
            op: "scatter_idx",
            msg: format!("{} sources for {} indices", src.numel(), idx.len()),
        });
    }
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    for (v, &i) in src.data().iter().zip(idx.iter()) {
        out[i] += v;
    }
    from_op(Op::ScatterIdx { idx }, vec![src.clone()], out_shape.to_vec(), out)
}

fn gather_idx(t: &Tensor, idx: Arc<Vec<usize>>) -> Result<Tensor> {
    let x = t.data();
    let out: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let len = out.len();
    from_op(Op::GatherIdx { idx }, vec![t.clone()], vec![len], out)
}

// ── Bilinear upsampling ─────────────────────────────────────────────

struct Lerp {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn lerp_axis(src: usize, dst: usize) -> Vec<Lerp> {
    // Corner-aligned: output corners map exactly onto input corners.
    let scale = if dst > 1 { (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
    (0..dst)
        .map(|i| {
            let s = (i as f64 * scale).min((src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Lerp { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

pub(super) fn upsample_bilinear(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (m, n) = match *t.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(Error::InvalidShape {
                op: "upsample_bilinear",
                expected: "[m,n]",
                got: t.shape().to_vec(),
            })
        }
    };
    if h < m || w < n {
        return Err(Error::InvalidArgument {
            op: "upsample_bilinear",
            msg: format!("target {}x{} smaller than source {}x{}", h, w, m, n),
        });
    }
    let x = t.data();
    let ys = lerp_axis(m, h);
    let xs = lerp_axis(n, w);
    let mut out = vec![0.0; h * w];
    for (i, y) in ys.iter().enumerate() {
        for (j, xw) in xs.iter().enumerate() {
            let tl = x[y.lo * n + xw.lo];
            let tr = x[y.lo * n + xw.hi];
            let bl = x[y.hi * n + xw.lo];
            let br = x[y.hi * n + xw.hi];
            let top = tl + (tr - tl) * xw.frac;
            let bot = bl + (br - bl) * xw.frac;
            out[i * w + j] = top + (bot - top) * y.frac;
        }
    }
    from_op(Op::UpsampleBilinear, vec![t.clone()], vec![h, w], out)
}

fn upsample_adjoint(g: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    let (h, w) = match *g.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "upsample_adjoint",
                expected: "[h,w]",
                got: g.shape().to_vec(),
            })
        }
    };
    let x = g.data();
    let ys = lerp_axis(m, h);
    let xs = lerp_axis(n, w);
    let mut out = vec![0.0; m * n];
    for (i, y) in ys.iter().enumerate() {
        for (j, xw) in xs.iter().enumerate() {
            let v = x[i * w + j];
            out[y.lo * n + xw.lo] += v * (1.0 - y.frac) * (1.0 - xw.frac);
            out[y.lo * n + xw.hi] += v * (1.0 - y.frac) * xw.frac;
            out[y.hi * n + xw.lo] += v * y.frac * (1.0 - xw.frac);
            out[y.hi * n + xw.hi] += v * y.frac * xw.frac;
        }
    }
    from_op(Op::UpsampleAdjoint, vec![g.clone()], vec![m, n], out)
}
