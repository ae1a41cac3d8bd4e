//! Primitive tensor operations and their analytical backward passes.
//!
//! Every forward has a matching `*_backward` that maps an upstream gradient
//! onto the inputs. Reductions accumulate sequentially in row-major order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Gradients of a convolution with respect to its three operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

fn check_conv(op: &'static str, x: Dims, weight: Dims, bias_len: usize) -> Result<()> {
    if weight.c != x.c {
        return Err(Error::shape(op, x, weight));
    }
    if weight.h != weight.w || weight.h.is_multiple_of(2) {
        return Err(Error::Domain(format!("{op}: kernel {weight} is not square with odd size")));
    }
    if bias_len != weight.b {
        return Err(Error::Shape {
            op,
            lhs: weight.to_string(),
            rhs: format!("bias[{bias_len}]"),
        });
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `delta`.
#[inline]
fn valid_range(extent: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (extent as isize - delta).clamp(0, extent as isize) as usize;
    (lo, hi.max(lo))
}

/// Stride-1 convolution with zero "same" padding and a square odd kernel.
///
/// `weight` has shape `(Cout, Cin, k, k)` and `bias` length `Cout`.
pub fn conv_same<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let (xd, wd) = (x.dims(), weight.dims());
    check_conv("conv", xd, wd, bias.len())?;
    let k = wd.h;
    let pad = (k / 2) as isize;
    let od = xd.with_channels(wd.b);
    let mut out = Tensor4::zeros(od);
    let width = xd.w;
    for b in 0..xd.b {
        for co in 0..wd.b {
            let o = out.plane_mut(b, co);
            o.fill(bias[co]);
            for ci in 0..xd.c {
                let xp = x.plane(b, ci);
                for kh in 0..k {
                    let dh = kh as isize - pad;
                    let (h0, h1) = valid_range(xd.h, dh);
                    for kw in 0..k {
                        let dw = kw as isize - pad;
                        let (w0, w1) = valid_range(width, dw);
                        let wv = weight.get(co, ci, kh, kw);
                        for h in h0..h1 {
                            let src = ((h as isize + dh) as usize) * width;
                            let xs = &xp[src + (w0 as isize + dw) as usize..];
                            let os = &mut o[h * width + w0..h * width + w1];
                            for (ov, &xv) in os.iter_mut().zip(xs) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv_same`].
pub fn conv_same_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (xd, wd) = (x.dims(), weight.dims());
    check_conv("conv_backward", xd, wd, wd.b)?;
    let od = xd.with_channels(wd.b);
    if grad_out.dims() != od {
        return Err(Error::shape("conv_backward", od, grad_out.dims()));
    }
    let k = wd.h;
    let pad = (k / 2) as isize;
    let width = xd.w;
    let mut gx = Tensor4::zeros(xd);
    let mut gw = Tensor4::zeros(wd);
    let mut gb = vec![T::zero(); wd.b];
    for b in 0..xd.b {
        for co in 0..wd.b {
            let g = grad_out.plane(b, co);
            let mut acc = T::zero();
            for &v in g {
                acc += v;
            }
            gb[co] += acc;
            for ci in 0..xd.c {
                let xp = x.plane(b, ci);
                for kh in 0..k {
                    let dh = kh as isize - pad;
                    let (h0, h1) = valid_range(xd.h, dh);
                    for kw in 0..k {
                        let dw = kw as isize - pad;
                        let (w0, w1) = valid_range(width, dw);
                        let wv = weight.get(co, ci, kh, kw);
                        let mut wacc = T::zero();
                        let gxp = gx.plane_mut(b, ci);
                        for h in h0..h1 {
                            let src = ((h as isize + dh) as usize) * width;
                            let start = src + (w0 as isize + dw) as usize;
                            let gs = &g[h * width + w0..h * width + w1];
                            let xs = &xp[start..start + gs.len()];
                            for (&gv, &xv) in gs.iter().zip(xs) {
                                wacc += gv * xv;
                            }
                            let gxs = &mut gxp[start..start + gs.len()];
                            for (gxv, &gv) in gxs.iter_mut().zip(gs) {
                                *gxv += wv * gv;
                            }
                        }
                        let i = wd.offset(co, ci, kh, kw);
                        gw.data_mut()[i] += wacc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { x: gx, weight: gw, bias: gb })
}

/// 1×1 convolution: `out[b,co,h,w] = Σ_ci W[co,ci]·x[b,ci,h,w] + bias[co]`.
pub fn pointwise_conv<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    if weight.dims().h != 1 || weight.dims().w != 1 {
        return Err(Error::Domain(format!("pointwise_conv: kernel {} is not 1×1", weight.dims())));
    }
    conv_same(x, weight, bias)
}

pub fn pointwise_conv_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    if weight.dims().h != 1 || weight.dims().w != 1 {
        return Err(Error::Domain(format!("pointwise_conv: kernel {} is not 1×1", weight.dims())));
    }
    conv_same_backward(x, weight, grad_out)
}

/// 3×3 convolution with one pixel of zero padding, as used inside bottlenecks.
pub fn conv3x3_same<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    if weight.dims().h != 3 || weight.dims().w != 3 {
        return Err(Error::Domain(format!("conv3x3_same: kernel {} is not 3×3", weight.dims())));
    }
    conv_same(x, weight, bias)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)`, evaluated without overflow.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Softplus,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Softplus => softplus(v),
            Activation::Silu => silu(v),
        }
    }

    /// Derivative of the activation at `v`.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        let s = sigmoid(v);
        match self {
            Activation::Sigmoid => s * (T::one() - s),
            Activation::Softplus => s,
            Activation::Silu => s * (T::one() + v * (T::one() - s)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Silu => "silu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Elementwise activation. Non-finite inputs are rejected.
pub fn activation<T: Scalar>(kind: Activation, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.ensure_finite(kind.name())?;
    Ok(x.map(|v| kind.apply(v)))
}

pub fn activation_backward<T: Scalar>(
    kind: Activation,
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    x.zip_map(grad_out, "activation_backward", |v, g| g * kind.derivative(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduce {
    Mean,
    Max,
}

/// Per-(batch, channel) spatial mean or max, shape `(B, C, 1, 1)`.
pub fn reduce_spatial<T: Scalar>(kind: Reduce, x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let count = T::from_usize(d.plane()).expect("plane size fits scalar");
    let mut out = Vec::with_capacity(d.b * d.c);
    for b in 0..d.b {
        for c in 0..d.c {
            let p = x.plane(b, c);
            let v = match kind {
                Reduce::Mean => {
                    let mut acc = T::zero();
                    let (mut lo, mut hi) = (p[0], p[0]);
                    for &v in p {
                        acc += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    // rounding can push the quotient one ulp past the extremes
                    (acc / count).max(lo).min(hi)
                }
                Reduce::Max => p[argmax(p)],
            };
            out.push(v);
        }
    }
    Tensor4::new(d.pooled(), out).expect("pooled extents")
}

/// First row-major index attaining the maximum.
pub(crate) fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Backward of [`reduce_spatial`]; max routes the whole gradient to the first
/// attaining position.
pub fn reduce_spatial_backward<T: Scalar>(
    kind: Reduce,
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let d = x.dims();
    if grad_out.dims() != d.pooled() {
        return Err(Error::shape("reduce_spatial_backward", d.pooled(), grad_out.dims()));
    }
    let count = T::from_usize(d.plane()).expect("plane size fits scalar");
    let mut gx = Tensor4::zeros(d);
    for b in 0..d.b {
        for c in 0..d.c {
            let g = grad_out.get(b, c, 0, 0);
            match kind {
                Reduce::Mean => gx.plane_mut(b, c).fill(g / count),
                Reduce::Max => {
                    let i = argmax(x.plane(b, c));
                    gx.plane_mut(b, c)[i] = g;
                }
            }
        }
    }
    Ok(gx)
}

fn check_pooled_pair(op: &'static str, z: &Tensor4<impl Scalar>, t: &Tensor4<impl Scalar>) -> Result<()> {
    if z.dims() != t.dims() {
        return Err(Error::shape(op, z.dims(), t.dims()));
    }
    if z.dims().h != 1 || z.dims().w != 1 {
        return Err(Error::shape(op, z.dims(), z.dims().pooled()));
    }
    Ok(())
}

/// Temperature-scaled softmax across the channel axis of a `(B, K, 1, 1)` tensor.
///
/// Logits are divided by their own temperature entry, then shifted by the
/// per-batch maximum before exponentiation.
pub fn softmax_over_channels<T: Scalar>(z: &Tensor4<T>, temp: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_pooled_pair("softmax_over_channels", z, temp)?;
    if let Some(i) = temp.data().iter().position(|&v| !(v > T::zero())) {
        return Err(Error::Domain(format!(
            "softmax_over_channels: temperature {} at index {i} is not positive",
            temp.data()[i]
        )));
    }
    let d = z.dims();
    let k = d.c;
    let mut out = Vec::with_capacity(d.len());
    for b in 0..d.b {
        let u: Vec<T> = (0..k).map(|c| z.get(b, c, 0, 0) / temp.get(b, c, 0, 0)).collect();
        let top = u.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = u.iter().map(|&v| (v - top).exp()).collect();
        let mut total = T::zero();
        for &v in &e {
            total += v;
        }
        out.extend(e.into_iter().map(|v| v / total));
    }
    Tensor4::new(d, out)
}

/// Backward of [`softmax_over_channels`], given its output `w`.
/// Returns gradients with respect to the logits and the temperatures.
pub fn softmax_backward<T: Scalar>(
    z: &Tensor4<T>,
    temp: &Tensor4<T>,
    w: &Tensor4<T>,
    grad_w: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_pooled_pair("softmax_backward", z, temp)?;
    check_pooled_pair("softmax_backward", w, grad_w)?;
    let d = z.dims();
    let mut gz = Tensor4::zeros(d);
    let mut gt = Tensor4::zeros(d);
    for b in 0..d.b {
        let mut inner = T::zero();
        for c in 0..d.c {
            inner += w.get(b, c, 0, 0) * grad_w.get(b, c, 0, 0);
        }
        for c in 0..d.c {
            let gu = w.get(b, c, 0, 0) * (grad_w.get(b, c, 0, 0) - inner);
            let t = temp.get(b, c, 0, 0);
            gz.set(b, c, 0, 0, gu / t);
            gt.set(b, c, 0, 0, -gu * z.get(b, c, 0, 0) / (t * t));
        }
    }
    Ok((gz, gt))
}

/// Concatenates tensors along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Domain("concat_channels: no parts".into()))?
        .dims();
    let mut channels = 0;
    for p in parts {
        let d = p.dims();
        if (d.b, d.h, d.w) != (first.b, first.h, first.w) {
            return Err(Error::shape("concat_channels", first, d));
        }
        channels += d.c;
    }
    let od = first.with_channels(channels);
    let mut data = Vec::with_capacity(od.len());
    for b in 0..first.b {
        for p in parts {
            for c in 0..p.dims().c {
                data.extend_from_slice(p.plane(b, c));
            }
        }
    }
    Tensor4::new(od, data)
}

/// Inverse of [`concat_channels`]: cuts `x` into consecutive channel blocks.
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let d = x.dims();
    if sizes.iter().sum::<usize>() != d.c || sizes.contains(&0) {
        return Err(Error::Shape {
            op: "split_channels",
            lhs: d.to_string(),
            rhs: format!("{sizes:?}"),
        });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let pd = d.with_channels(s);
        let mut data = Vec::with_capacity(pd.len());
        for b in 0..d.b {
            for c in start..start + s {
                data.extend_from_slice(x.plane(b, c));
            }
        }
        out.push(Tensor4::new(pd, data)?);
        start += s;
    }
    Ok(out)
}

/// Multiplies each channel plane of `x` by the matching entry of `gate`
/// (`(B, C, 1, 1)`), broadcasting over height and width.
pub fn scale_channels<T: Scalar>(x: &Tensor4<T>, gate: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    if gate.dims() != d.pooled() {
        return Err(Error::shape("scale_channels", d, gate.dims()));
    }
    let mut out = x.clone();
    for b in 0..d.b {
        for c in 0..d.c {
            let g = gate.get(b, c, 0, 0);
            for v in out.plane_mut(b, c) {
                *v *= g;
            }
        }
    }
    Ok(out)
}

/// Backward of [`scale_channels`]: gradients for `x` and `gate`.
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor4<T>,
    gate: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let d = x.dims();
    if grad_out.dims() != d {
        return Err(Error::shape("scale_channels_backward", d, grad_out.dims()));
    }
    let gx = scale_channels(grad_out, gate)?;
    let mut gg = Tensor4::zeros(d.pooled());
    for b in 0..d.b {
        for c in 0..d.c {
            let mut acc = T::zero();
            for (&g, &v) in grad_out.plane(b, c).iter().zip(x.plane(b, c)) {
                acc += g * v;
            }
            gg.set(b, c, 0, 0, acc);
        }
    }
    Ok((gx, gg))
}
