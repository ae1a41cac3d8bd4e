use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{conv_same, conv_same_backward};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Parameterized, Tensor4};

/// Square stride-1 same-padding convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    /// `(Cout, Cin, k, k)`.
    pub weight: Tensor4<T>,
    /// `(Cout, 1, 1, 1)`.
    pub bias: Tensor4<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Conv {
            weight: Tensor4::zeros(Dims::new(c_out, c_in, k, k)),
            bias: Tensor4::zeros(Dims::new(c_out, 1, 1, 1)),
        }
    }

    /// Uniform initialization in `[−1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self::uniform_bound(c_in, c_out, k, bound, rng)
    }

    pub fn uniform_bound<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, bound: f64, rng: &mut R) -> Self {
        let mut conv = Self::zeros(c_in, c_out, k);
        for v in conv.weight.data_mut().iter_mut().chain(conv.bias.data_mut()) {
            *v = T::c(rng.random_range(-bound..=bound));
        }
        conv
    }

    /// Wraps existing tensors, checking that they describe one convolution.
    pub fn from_parts(weight: Tensor4<T>, bias: Tensor4<T>) -> Result<Self> {
        let wd = weight.dims();
        if bias.dims() != Dims::new(wd.b, 1, 1, 1) {
            return Err(Error::shape("conv bias", wd, bias.dims()));
        }
        Ok(Conv { weight, bias })
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().b
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims().h
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv_same(x, &self.weight, self.bias.data())
    }

    /// Returns `(grad_x, grad_params)`.
    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Conv<T>)> {
        let g = conv_same_backward(x, &self.weight, grad_out)?;
        let bias = Tensor4::new(self.bias.dims(), g.bias)?;
        Ok((g.x, Conv { weight: g.weight, bias }))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_in(), self.c_out(), self.kernel())
    }
}

impl<T: Scalar> Parameterized<T> for Conv<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
