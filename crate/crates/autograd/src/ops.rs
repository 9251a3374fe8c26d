//! Differentiable operations.
//!
//! Every backward rule is written in terms of other differentiable
//! operations, so the gradient graph can itself be differentiated. The three
//! convolution variants (forward, input-adjoint, weight-adjoint) close under
//! differentiation, as do upsample/sum-pool, narrow/pad and sum-to/broadcast.

use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    PowScalar(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sigmoid(Tensor),
    /// Piecewise-linear op whose local derivative is the stored mask.
    Gated(Tensor, Arc<Vec<f64>>),
    MaxPool2(Tensor, Arc<Vec<f64>>),
    SumTo(Tensor),
    BroadcastTo(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    MatMul { a: Tensor, b: Tensor, ta: bool, tb: bool },
    Conv2d { x: Tensor, w: Tensor, stride: usize, pad: usize },
    ConvTranspose2d { gy: Tensor, w: Tensor, stride: usize, pad: usize },
    ConvWeightGrad { x: Tensor, gy: Tensor, stride: usize, pad: usize },
    Upsample(Tensor, usize),
    SumPool(Tensor, usize),
    Narrow { input: Tensor, axis: usize, start: usize },
    Pad { input: Tensor, axis: usize, before: usize },
    Concat { inputs: Vec<Tensor>, axis: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gated(..) => "gated",
            Op::MaxPool2(..) => "max_pool2",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
            Op::Upsample(..) => "upsample",
            Op::SumPool(..) => "sum_pool",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::Concat { .. } => "concat",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ConvTranspose2d { gy, w, .. } => vec![gy, w],
            Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Gated(a, _)
            | Op::MaxPool2(a, _)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Upsample(a, _)
            | Op::SumPool(a, _) => vec![a],
            Op::Narrow { input, .. } | Op::Pad { input, .. } => vec![input],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
        }
    }

    pub(crate) fn into_inputs(self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ConvTranspose2d { gy, w, .. } => vec![gy, w],
            Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Gated(a, _)
            | Op::MaxPool2(a, _)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Upsample(a, _)
            | Op::SumPool(a, _) => vec![a],
            Op::Narrow { input, .. } | Op::Pad { input, .. } => vec![input],
            Op::Concat { inputs, .. } => inputs,
        }
    }

    pub(crate) fn any_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }

    /// Gradients with respect to each input (`None` where not needed).
    pub(crate) fn backward(&self, out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Add(a, b) => vec![
                want(0).then(|| g.sum_to(a.shape())),
                want(1).then(|| g.sum_to(b.shape())),
            ],
            Op::Sub(a, b) => vec![
                want(0).then(|| g.sum_to(a.shape())),
                want(1).then(|| g.neg().sum_to(b.shape())),
            ],
            Op::Mul(a, b) => vec![
                want(0).then(|| g.mul(b).sum_to(a.shape())),
                want(1).then(|| g.mul(a).sum_to(b.shape())),
            ],
            Op::Div(a, b) => vec![
                want(0).then(|| g.div(b).sum_to(a.shape())),
                want(1).then(|| g.mul(out).div(b).neg().sum_to(b.shape())),
            ],
            Op::Neg(_) => vec![Some(g.neg())],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::MulScalar(_, s) => vec![Some(g.mul_scalar(*s))],
            Op::PowScalar(x, p) => vec![Some(g.mul(&x.powf(p - 1.0)).mul_scalar(*p))],
            Op::Exp(_) => vec![Some(g.mul(out))],
            Op::Log(x) => vec![Some(g.div(x))],
            Op::Sigmoid(_) => vec![Some(g.mul(&out.sub(&out.mul(out))))],
            Op::Gated(x, mask) => vec![Some(g.mul(&mask_tensor(mask, x.shape())))],
            Op::MaxPool2(x, mask) => vec![Some(g.upsample_nearest(2).mul(&mask_tensor(mask, x.shape())))],
            Op::SumTo(x) => vec![Some(g.broadcast_to(x.shape()))],
            Op::BroadcastTo(x) => vec![Some(g.sum_to(x.shape()))],
            Op::Reshape(x) => vec![Some(g.reshape(x.shape()))],
            Op::Permute(_, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(g.permute(&inv))]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (
                        want(0).then(|| g.matmul_t(b, false, true)),
                        want(1).then(|| a.matmul_t(g, true, false)),
                    ),
                    (true, false) => (
                        want(0).then(|| b.matmul_t(g, false, true)),
                        want(1).then(|| a.matmul_t(g, false, false)),
                    ),
                    (false, true) => (
                        want(0).then(|| g.matmul_t(b, false, false)),
                        want(1).then(|| g.matmul_t(a, true, false)),
                    ),
                    (true, true) => (
                        want(0).then(|| b.matmul_t(g, true, true)),
                        want(1).then(|| g.matmul_t(a, true, true)),
                    ),
                };
                vec![ga, gb]
            }
            Op::Conv2d { x, w, stride, pad } => vec![
                want(0).then(|| conv_transpose2d(g, w, *stride, *pad, x.shape())),
                want(1).then(|| conv_weight_grad(x, g, *stride, *pad, w.shape())),
            ],
            Op::ConvTranspose2d { gy, w, stride, pad } => vec![
                want(0).then(|| g.conv2d(w, *stride, *pad)),
                want(1).then(|| conv_weight_grad(g, gy, *stride, *pad, w.shape())),
            ],
            Op::ConvWeightGrad { x, gy, stride, pad } => vec![
                want(0).then(|| conv_transpose2d(gy, g, *stride, *pad, x.shape())),
                want(1).then(|| x.conv2d(g, *stride, *pad)),
            ],
            Op::Upsample(_, f) => vec![Some(g.sum_pool(*f))],
            Op::SumPool(_, f) => vec![Some(g.upsample_nearest(*f))],
            Op::Narrow { input, axis, start } => vec![Some(g.pad_axis(*axis, *start, input.dim(*axis)))],
            Op::Pad { input, axis, before } => vec![Some(g.narrow(*axis, *before, input.dim(*axis)))],
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let len = t.dim(*axis);
                        let r = want(i).then(|| g.narrow(*axis, offset, len));
                        offset += len;
                        r
                    })
                    .collect()
            }
        }
    }
}

fn mask_tensor(mask: &Arc<Vec<f64>>, shape: &[usize]) -> Tensor {
    Tensor::build(mask.as_ref().clone(), shape.to_vec(), false, None)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), op)
}

pub(crate) fn conv_transpose2d(gy: &Tensor, w: &Tensor, stride: usize, pad: usize, x_shape: &[usize]) -> Tensor {
    let geom = ConvGeom::new(x_shape, w.shape(), stride, pad);
    assert_eq!(gy.shape(), [geom.n, geom.o, geom.ho, geom.wo], "conv_transpose2d gradient shape mismatch");
    let data = kernels::conv2d_transpose(gy.data(), w.data(), &geom);
    Tensor::from_op(
        data,
        x_shape.to_vec(),
        Op::ConvTranspose2d { gy: gy.clone(), w: w.clone(), stride, pad },
    )
}

pub(crate) fn conv_weight_grad(x: &Tensor, gy: &Tensor, stride: usize, pad: usize, w_shape: &[usize]) -> Tensor {
    let geom = ConvGeom::new(x.shape(), w_shape, stride, pad);
    assert_eq!(gy.shape(), [geom.n, geom.o, geom.ho, geom.wo], "conv_weight_grad gradient shape mismatch");
    let data = kernels::conv2d_weight_grad(x.data(), gy.data(), &geom);
    Tensor::from_op(
        data,
        w_shape.to_vec(),
        Op::ConvWeightGrad { x: x.clone(), gy: gy.clone(), stride, pad },
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let (d, s) = kernels::binary(self.data(), self.shape(), other.data(), other.shape(), |a, b| a + b);
        Tensor::from_op(d, s, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (d, s) = kernels::binary(self.data(), self.shape(), other.data(), other.shape(), |a, b| a - b);
        Tensor::from_op(d, s, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (d, s) = kernels::binary(self.data(), self.shape(), other.data(), other.shape(), |a, b| a * b);
        Tensor::from_op(d, s, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (d, s) = kernels::binary(self.data(), self.shape(), other.data(), other.shape(), |a, b| a / b);
        Tensor::from_op(d, s, Op::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |v| -v, Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, |v| v + s, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        unary(self, |v| v * s, Op::MulScalar(self.clone(), s))
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, |v| v.powf(p), Op::PowScalar(self.clone(), p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, Op::Log(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, Op::Sigmoid(self.clone()))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gated(self.clone(), Arc::new(mask)))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn abs(&self) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect();
        let data = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gated(self.clone(), Arc::new(mask)))
    }

    /// Elementwise clamp; the gradient passes through inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&v| if v >= lo && v <= hi { 1.0 } else { 0.0 }).collect();
        let data = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gated(self.clone(), Arc::new(mask)))
    }

    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if self.shape() == target {
            return self.clone();
        }
        assert_eq!(
            kernels::broadcast_shape(target, self.shape()).as_deref(),
            Some(self.shape()),
            "cannot sum {:?} down to {target:?}",
            self.shape()
        );
        let data = kernels::sum_to(self.data(), self.shape(), target);
        Tensor::from_op(data, target.to_vec(), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        if self.shape() == target {
            return self.clone();
        }
        assert_eq!(
            kernels::broadcast_shape(self.shape(), target).as_deref(),
            Some(target),
            "cannot broadcast {:?} to {target:?}",
            self.shape()
        );
        let data = kernels::broadcast_to(self.data(), self.shape(), target);
        Tensor::from_op(data, target.to_vec(), Op::BroadcastTo(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions if `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let mut kept = self.shape().to_vec();
        for &a in axes {
            kept[a] = 1;
        }
        let s = self.sum_to(&kept);
        if keepdim {
            s
        } else {
            let squeezed: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            s.reshape(&squeezed)
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_axes(axes, keepdim).mul_scalar(1.0 / n.max(1) as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            kernels::numel(shape),
            self.numel(),
            "cannot reshape {:?} to {shape:?}",
            self.shape()
        );
        if self.shape() == shape {
            return self.clone();
        }
        let op = Op::Reshape(self.clone());
        let requires = crate::tensor::is_grad_enabled() && self.requires_grad();
        Tensor(Arc::new(crate::tensor::Node {
            id: crate::tensor::fresh_id(),
            shape: shape.to_vec(),
            data: self.shared_data(),
            requires_grad: requires,
            op: requires.then_some(op),
        }))
    }

    pub fn flatten(&self) -> Tensor {
        self.reshape(&[self.numel()])
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank(), "permutation rank mismatch");
        let (d, s) = kernels::permute(self.data(), self.shape(), perm);
        Tensor::from_op(d, s, Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Matrix product of 2-D or batched 3-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either (last two axes
    /// of the) operand.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        if self.rank() == 2 && other.rank() == 2 {
            let a = self.reshape(&[1, self.dim(0), self.dim(1)]);
            let b = other.reshape(&[1, other.dim(0), other.dim(1)]);
            let c = a.matmul_t(&b, ta, tb);
            return c.reshape(&[c.dim(1), c.dim(2)]);
        }
        assert!(self.rank() == 3 && other.rank() == 3, "matmul expects 2-D or 3-D operands");
        let batch = self.dim(0);
        assert_eq!(batch, other.dim(0), "matmul batch mismatch");
        let (m, k) = if ta { (self.dim(2), self.dim(1)) } else { (self.dim(1), self.dim(2)) };
        let (k2, n) = if tb { (other.dim(2), other.dim(1)) } else { (other.dim(1), other.dim(2)) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", self.shape(), other.shape());
        let data = kernels::matmul(self.data(), other.data(), batch, m, k, n, ta, tb);
        Tensor::from_op(
            data,
            vec![batch, m, n],
            Op::MatMul { a: self.clone(), b: other.clone(), ta, tb },
        )
    }

    /// 2-D cross-correlation of an NCHW input with an OCKK kernel.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let geom = ConvGeom::new(self.shape(), w.shape(), stride, pad);
        let data = kernels::conv2d(self.data(), w.data(), &geom);
        Tensor::from_op(
            data,
            vec![geom.n, geom.o, geom.ho, geom.wo],
            Op::Conv2d { x: self.clone(), w: w.clone(), stride, pad },
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "upsample expects NCHW");
        let s = self.shape();
        let data = kernels::upsample_nearest(self.data(), s, factor);
        Tensor::from_op(data, vec![s[0], s[1], s[2] * factor, s[3] * factor], Op::Upsample(self.clone(), factor))
    }

    pub fn sum_pool(&self, factor: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "sum_pool expects NCHW");
        let s = self.shape();
        let data = kernels::sum_pool(self.data(), s, factor);
        Tensor::from_op(data, vec![s[0], s[1], s[2] / factor, s[3] / factor], Op::SumPool(self.clone(), factor))
    }

    pub fn avg_pool(&self, factor: usize) -> Tensor {
        self.sum_pool(factor).mul_scalar(1.0 / (factor * factor) as f64)
    }

    pub fn max_pool2(&self) -> Tensor {
        assert_eq!(self.rank(), 4, "max_pool2 expects NCHW");
        let s = self.shape();
        let (data, mask) = kernels::max_pool2(self.data(), s);
        Tensor::from_op(data, vec![s[0], s[1], s[2] / 2, s[3] / 2], Op::MaxPool2(self.clone(), Arc::new(mask)))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.dim(axis), "narrow out of range");
        if start == 0 && len == self.dim(axis) {
            return self.clone();
        }
        let data = kernels::narrow(self.data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, Op::Narrow { input: self.clone(), axis, start })
    }

    /// Zero-pads along `axis` so that the input starts at `before` and the
    /// result has length `total`.
    pub fn pad_axis(&self, axis: usize, before: usize, total: usize) -> Tensor {
        assert!(before + self.dim(axis) <= total, "pad_axis target too small");
        if before == 0 && total == self.dim(axis) {
            return self.clone();
        }
        let data = kernels::pad_axis(self.data(), self.shape(), axis, before, total);
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(data, shape, Op::Pad { input: self.clone(), axis, before })
    }

    pub fn cat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "cat of nothing");
        if tensors.len() == 1 {
            return tensors[0].clone();
        }
        let first = tensors[0].shape();
        let mut total = 0;
        for t in tensors {
            assert_eq!(t.rank(), first.len(), "cat rank mismatch");
            for (d, (&a, &b)) in t.shape().iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {first:?}", t.shape());
            }
            total += t.dim(axis);
        }
        let (outer, _, inner) = kernels::axis_split(first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let n = t.dim(axis);
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::from_op(data, shape, Op::Concat { inputs: tensors.to_vec(), axis })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, n, inner) = kernels::axis_split(self.shape(), axis);
        let mut maxes = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let v = self.data()[(o * n + i) * inner + j];
                    let m = &mut maxes[o * inner + j];
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
        let mut kept = self.shape().to_vec();
        kept[axis] = 1;
        let shift = Tensor::from_vec(maxes, &kept);
        let e = self.sub(&shift).exp();
        e.div(&e.sum_axes(&[axis], true))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$method(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(&self, rhs)
            }
        }
    };
}

binary_operator!(Add, add);
binary_operator!(Sub, sub);
binary_operator!(Mul, mul);
binary_operator!(Div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

impl std::ops::Neg for Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(&self)
    }
}
