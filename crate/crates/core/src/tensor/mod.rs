//! Dense rank-3 tensors and the differentiable primitives built on them.
//!
//! Every feature map is stored as `(batch, time, channels)` with time-major
//! layout inside a batch item, so one time step is a contiguous run of
//! `channels` values. Flat vectors (the SE excitation path and the FC head)
//! are tensors with `time == 1`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub mod layer;
pub mod ops;
pub mod param;
pub mod tape;

pub use layer::Layer;
pub use param::{BatchNormParams, ConvParams, DenseParams, Param, ParamKind, Parameterized};
pub use tape::{GradTape, Mode, Record, Session};

/// Scalar type of a tensor. Training runs in `f32`; the gradient oracle runs
/// the same code in `f64`.
pub trait Real:
    Float + Debug + Display + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, time: usize, channels: usize) -> Self {
        Shape {
            batch,
            time,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.time * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}x{}x{})", self.batch, self.time, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from `f(b, t, c)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for t in 0..shape.time {
                for c in 0..shape.channels {
                    data.push(f(b, t, c));
                }
            }
        }
        Tensor { shape, data }
    }

    /// Single-channel, single-item tensor from a sequence.
    pub fn from_series(values: &[T]) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1),
            data: values.to_vec(),
        }
    }

    /// `(batch, 1, features)` tensor from rows of equal width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("rows of unequal width".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(Shape::new(rows.len(), 1, width), data)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.shape.time + t) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, c: usize) -> T {
        self.data[self.index(b, t, c)]
    }

    /// Values of one batch item, time-major.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.time * self.shape.channels;
        &self.data[b * n..(b + 1) * n]
    }

    /// Row `b` of a `time == 1` tensor.
    pub fn row(&self, b: usize) -> &[T] {
        debug_assert_eq!(self.shape.time, 1);
        self.item(b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.expect_same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {} and {} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenates `time == 1` tensors along channels.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let batch = first.shape.batch;
        if parts.iter().any(|p| p.shape.batch != batch || p.shape.time != 1) {
            return Err(Error::Dimension(format!(
                "concat needs equal batch and time 1, got {:?}",
                parts.iter().map(|p| p.shape.to_string()).collect::<Vec<_>>()
            )));
        }
        let width: usize = parts.iter().map(|p| p.shape.channels).sum();
        let mut data = Vec::with_capacity(batch * width);
        for b in 0..batch {
            for p in parts {
                data.extend_from_slice(p.row(b));
            }
        }
        Tensor::new(Shape::new(batch, 1, width), data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if self.shape.time != 1 || widths.iter().sum::<usize>() != self.shape.channels {
            return Err(Error::Dimension(format!(
                "cannot split {} into channel widths {widths:?}",
                self.shape
            )));
        }
        let mut out: Vec<Vec<T>> = widths
            .iter()
            .map(|w| Vec::with_capacity(w * self.shape.batch))
            .collect();
        for b in 0..self.shape.batch {
            let mut row = self.row(b);
            for (dst, &w) in out.iter_mut().zip(widths) {
                dst.extend_from_slice(&row[..w]);
                row = &row[w..];
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &w)| Tensor::new(Shape::new(self.shape.batch, 1, w), d))
            .collect()
    }
}
