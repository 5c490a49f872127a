//! Parameterized layers built on the autograd [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{Scalar, Tensor};

fn normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialization scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain * (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), normal(&[out_ch, in_ch, kernel, kernel], std, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution ("deconvolution") with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about in_ch·(k/stride)² contributions.
        let fan = in_ch * (kernel / stride).max(1).pow(2);
        let std = (2.0 / fan as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), normal(&[in_ch, out_ch, kernel, kernel], std, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/√in` initialization, scaled by `gain`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), uniform(&[out_dim, in_dim], bound, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Standard-normal initialized embedding table `[rows, dim]`.
pub fn embedding<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> ParamId {
    store.insert(name.to_string(), normal(&[rows, dim], 1.0, rng))
}
