//! Dense rank-4 tensors in (batch, channel, height, width) layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor, batch-outer and width-inner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { b, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one (batch, channel) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    /// The `(B, C, 1, 1)` shape of a per-channel statistic.
    pub fn pooled(self) -> Self {
        Dims { h: 1, w: 1, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array of scalars stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Builds a tensor, checking that every extent is at least one and the
    /// buffer length matches.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.b == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::Domain(format!("zero extent in {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Domain(format!(
                "buffer of {} elements does not fit {dims} ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn full(dims: Dims, value: T) -> Self {
        assert!(!dims.is_empty(), "zero extent in {dims}");
        Tensor4 { dims, data: vec![value; dims.len()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert!(!dims.is_empty(), "zero extent in {dims}");
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.b {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    /// A `(len, 1, 1, 1)` tensor holding a vector, the layout used for biases.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::new(Dims::new(values.len(), 1, 1, 1), values)
    }

    /// A `(1, len, 1, 1)` tensor.
    pub fn channels(values: Vec<T>) -> Result<Self> {
        Self::new(Dims::new(1, values.len(), 1, 1), values)
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.dims.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.dims.offset(b, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous spatial plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (b * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (b * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(op, self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor4 { dims: self.dims, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("add_assign", self.dims, other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sequential row-major sum.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Sequential row-major dot product.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape("dot", self.dims, other.dims));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Domain(format!("{op}: non-finite input at flat index {i}"))),
        }
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
        }
    }
}

/// Named view over the learnable tensors of a module.
///
/// Names are stable and the listing order is fixed; it defines manifest order
/// and the flattening order used by gradient checks and optimizers.
pub trait Parameterized<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Tensor4<T>)>,
) -> impl Iterator<Item = (String, &'a Tensor4<T>)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor4<T>)>,
) -> impl Iterator<Item = (String, &'a mut Tensor4<T>)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Loss derivatives keyed by parameter name, in the module's fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    entries: Vec<(String, Tensor4<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Collects the gradient tensors out of a gradient-valued parameter set.
    pub fn from_params<P: Parameterized<T>>(grads: &P) -> Self {
        Gradients {
            entries: grads.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every gradient has the shape of the parameter it belongs to.
    pub fn matches<P: Parameterized<T>>(&self, params: &P) -> bool {
        let named = params.named();
        named.len() == self.entries.len()
            && named
                .iter()
                .zip(&self.entries)
                .all(|((pn, pt), (gn, gt))| pn == gn && pt.dims() == gt.dims())
    }
}

/// Flattens all parameters into one vector in `named()` order.
pub fn flatten_params<T: Scalar, P: Parameterized<T>>(p: &P) -> Vec<T> {
    p.named().into_iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Writes a flat vector back into the parameters in `named()` order.
pub fn unflatten_params<T: Scalar, P: Parameterized<T>>(p: &mut P, flat: &[T]) {
    let mut i = 0;
    for (_, t) in p.named_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[i..i + n]);
        i += n;
    }
    assert_eq!(i, flat.len(), "flat parameter vector length mismatch");
}
