use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Weights, bias and their gradient buffers for one convolution stage.
///
/// Weights are `(c_out, c_in, k, k)` for a regular convolution. A transposed
/// convolution stores `(c_in, c_out, k, k)`, the layout of the convolution it
/// is the adjoint of; its bias then has `c_out = weights.c` entries.
#[derive(Debug, Clone)]
pub struct ConvLayerParams<T: Scalar = f64> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
    /// A disabled bias stays at zero and is not exposed to optimizers.
    pub bias_enabled: bool,
    velocity_weights: Vec<T>,
    velocity_bias: Vec<T>,
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        let shape = Shape::new(c_out, c_in, k, k)?;
        Ok(Self::from_parts(Tensor::zeros(shape), vec![T::zero(); c_out]))
    }

    /// Uniform in `[-s, s]` with `s = 1 / sqrt(c_in * k * k)`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(c_out, c_in, k, k)?;
        let s = (1.0 / (c_in * k * k) as f64).sqrt();
        Ok(Self::from_parts(
            Tensor::random_uniform(shape, -s, s, rng),
            vec![T::zero(); c_out],
        ))
    }

    /// Zero parameters for a transposed convolution mapping `c_in -> c_out`.
    pub fn transposed_zeros(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let shape = Shape::new(c_in, c_out, k, k)?;
        Ok(Self::from_parts(Tensor::zeros(shape), vec![T::zero(); c_out]))
    }

    pub fn init_transposed<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(c_in, c_out, k, k)?;
        let s = (1.0 / (c_in * k * k) as f64).sqrt();
        Ok(Self::from_parts(
            Tensor::random_uniform(shape, -s, s, rng),
            vec![T::zero(); c_out],
        ))
    }

    pub fn from_weights(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return Err(Error::shape(format!("convolution kernel must be square, got {s}")));
        }
        if bias.len() != s.n && bias.len() != s.c {
            return Err(Error::shape(format!(
                "bias of length {} matches neither dimension of {s}",
                bias.len()
            )));
        }
        Ok(Self::from_parts(weights, bias))
    }

    fn from_parts(weights: Tensor<T>, bias: Vec<T>) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_bias = vec![T::zero(); bias.len()];
        ConvLayerParams {
            weights,
            bias,
            grad_weights,
            grad_bias,
            bias_enabled: true,
            velocity_weights: Vec::new(),
            velocity_bias: Vec::new(),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias.iter_mut().for_each(|b| *b = T::zero());
        self.bias_enabled = false;
        self
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn k(&self) -> usize {
        self.weights.shape().h
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + if self.bias_enabled { self.bias.len() } else { 0 }
    }
}

/// Mutable access to one parameter buffer during an optimizer step.
pub struct ParamView<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    /// Momentum buffer; empty until the first step.
    pub velocity: &'a mut Vec<T>,
}

/// Anything holding learnable parameters.
pub trait Trainable<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }
}

impl<T: Scalar> Trainable<T> for ConvLayerParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: "weights".into(),
            value: self.weights.data_mut(),
            grad: self.grad_weights.data_mut(),
            velocity: &mut self.velocity_weights,
        });
        if self.bias_enabled {
            f(ParamView {
                name: "bias".into(),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
                velocity: &mut self.velocity_bias,
            });
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- m v + g + wd p`, `p <- p - lr v`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, params: &mut (impl Trainable<T> + ?Sized)) {
        sgd_step(params, self.lr, self.momentum, self.weight_decay)
    }
}

pub fn sgd_step<T: Scalar>(
    params: &mut (impl Trainable<T> + ?Sized),
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    params.visit_params(&mut |p| {
        if p.velocity.len() != p.value.len() {
            *p.velocity = vec![T::zero(); p.value.len()];
        }
        for ((v, w), &g) in p.velocity.iter_mut().zip(p.value.iter_mut()).zip(p.grad.iter()) {
            *v = m * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
    });
}
