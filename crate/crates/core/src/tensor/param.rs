use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv and dense weights: trained and subject to weight decay.
    Weight,
    /// Biases and batch-norm affine terms: trained, never decayed.
    Bias,
    /// Running statistics: persisted but not trained.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(dims: &[usize], kind: ParamKind) -> Self {
        Self::filled(dims, kind, T::zero())
    }

    pub fn filled(dims: &[usize], kind: ParamKind, value: T) -> Self {
        let n = dims.iter().product();
        let grad = if kind == ParamKind::Buffer {
            Vec::new()
        } else {
            vec![T::zero(); n]
        };
        Param {
            value: vec![value; n],
            grad,
            kind,
            dims: dims.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        debug_assert_eq!(grad.len(), self.grad.len());
        for (g, &d) in self.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.iter().map(|v| U::of(v.f64())).collect(),
            grad: self.grad.iter().map(|v| U::of(v.f64())).collect(),
            kind: self.kind,
            dims: self.dims.clone(),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters. Visiting order is stable and defines
/// the flat parameter layout used by the optimizer, checkpoints and the
/// gradient oracle.
pub trait Parameterized<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Trainable values concatenated in visiting order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                out.extend_from_slice(&p.value)
            }
        });
        out
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                out.extend_from_slice(&p.grad)
            }
        });
        out
    }

    fn set_flat_values(&mut self, values: &[T]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} parameter values, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, p| {
            if p.is_trainable() {
                let n = p.len();
                p.value.copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        });
        Ok(())
    }
}

/// A 1D convolution: `weight` is `(out, in, kernel)`, `bias` is `(out,)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    /// Width-3 convolution with stride 1 or 3 and padding 0 or 1, or a
    /// width-1 projection (stride 1, no padding). Weights start at zero.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let valid = match kernel {
            3 => matches!(stride, 1 | 3) && matches!(padding, 0 | 1),
            1 => stride == 1 && padding == 0,
            _ => false,
        };
        if !valid || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "unsupported conv: {in_channels}->{out_channels} kernel {kernel} stride {stride} padding {padding}"
            )));
        }
        Ok(ConvParams {
            weight: Param::new(&[out_channels, in_channels, kernel], ParamKind::Weight),
            bias: Param::new(&[out_channels], ParamKind::Bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_len(&self, time: usize) -> Option<usize> {
        let padded = time + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// He-uniform weights, zero bias.
    pub fn init_he_uniform(&mut self, rng: &mut impl Rng) {
        he_uniform(&mut self.weight.value, self.in_channels * self.kernel, rng);
        self.bias.value.iter_mut().for_each(|b| *b = T::zero());
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, k: usize) -> T {
        self.weight.value[(o * self.in_channels + i) * self.kernel + k]
    }

    #[inline]
    pub fn w_mut(&mut self, o: usize, i: usize, k: usize) -> &mut T {
        &mut self.weight.value[(o * self.in_channels + i) * self.kernel + k]
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T: Real> Parameterized<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully-connected layer: `weight` is `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> DenseParams<T> {
    pub fn new(in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "dense layer needs nonzero dims, got {in_dim}->{out_dim}"
            )));
        }
        Ok(DenseParams {
            weight: Param::new(&[out_dim, in_dim], ParamKind::Weight),
            bias: Param::new(&[out_dim], ParamKind::Bias),
            in_dim,
            out_dim,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut p = Self::new(dim, dim)?;
        for i in 0..dim {
            p.weight.value[i * dim + i] = T::one();
        }
        Ok(p)
    }

    pub fn init_he_uniform(&mut self, rng: &mut impl Rng) {
        he_uniform(&mut self.weight.value, self.in_dim, rng);
        self.bias.value.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn cast<U: Real>(&self) -> DenseParams<U> {
        DenseParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }
}

impl<T: Real> Parameterized<T> for DenseParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl<T: Real> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Param::filled(&[channels], ParamKind::Bias, T::one()),
            beta: Param::new(&[channels], ParamKind::Bias),
            running_mean: Param::new(&[channels], ParamKind::Buffer),
            running_var: Param::filled(&[channels], ParamKind::Buffer, T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            channels,
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
            momentum: self.momentum,
            channels: self.channels,
        }
    }
}

impl<T: Real> Parameterized<T> for BatchNormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

fn he_uniform<T: Real>(values: &mut [T], fan_in: usize, rng: &mut impl Rng) {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    for v in values {
        *v = T::of(rng.gen_range(-bound..bound));
    }
}
