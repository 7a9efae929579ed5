//! [`Layer`] wrappers that let primitives and composites be driven (and
//! gradient-checked) through one interface.

use super::ops;
use super::param::{BatchNormParams, ConvParams, DenseParams, Param, Parameterized};
use super::tape::Session;
use super::{Real, Tensor};
use crate::error::Result;

pub trait Layer<T: Real>: Parameterized<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Layer<T> for ConvParams<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::conv1d(x, self, &mut sess.tape)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::conv1d_backward(grad, self, &mut sess.tape)?;
        self.weight.accumulate(&g.weight);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

impl<T: Real> Layer<T> for DenseParams<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::dense(x, self, &mut sess.tape)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::dense_backward(grad, self, &mut sess.tape)?;
        self.weight.accumulate(&g.weight);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

impl<T: Real> Layer<T> for BatchNormParams<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::batchnorm1d(x, self, sess.mode, &mut sess.tape)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::batchnorm1d_backward(grad, self, &mut sess.tape)?;
        self.gamma.accumulate(&g.gamma);
        self.beta.accumulate(&g.beta);
        Ok(g.input)
    }
}

macro_rules! stateless {
    ($name:ident) => {
        impl<T: Real> Parameterized<T> for $name {
            fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
            fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
        }
    };
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Relu;
stateless!(Relu);

impl<T: Real> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(x, &mut sess.tape))
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::relu_backward(grad, &mut sess.tape)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sigmoid;
stateless!(Sigmoid);

impl<T: Real> Layer<T> for Sigmoid {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        Ok(ops::sigmoid(x, &mut sess.tape))
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::sigmoid_backward(grad, &mut sess.tape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool(pub usize);
stateless!(MaxPool);

impl<T: Real> Layer<T> for MaxPool {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::maxpool1d(x, self.0, &mut sess.tape)
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::maxpool1d_backward(grad, &mut sess.tape)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalAvgPool;
stateless!(GlobalAvgPool);

impl<T: Real> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x, &mut sess.tape)
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool_backward(grad, &mut sess.tape)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalMaxPool;
stateless!(GlobalMaxPool);

impl<T: Real> Layer<T> for GlobalMaxPool {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::global_max_pool(x, &mut sess.tape)
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::global_max_pool_backward(grad, &mut sess.tape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dropout(pub f64);
stateless!(Dropout);

impl<T: Real> Layer<T> for Dropout {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::dropout(x, self.0, sess.mode, &mut sess.rng, &mut sess.tape)
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        ops::dropout_backward(grad, &mut sess.tape)
    }
}

/// Layers applied in order.
pub struct Sequential<T>(pub Vec<Box<dyn Layer<T>>>);

impl<T: Real> Parameterized<T> for Sequential<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.0.iter().enumerate() {
            l.visit(&super::param::join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.0.iter_mut().enumerate() {
            l.visit_mut(&super::param::join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.0 {
            h = l.forward(&h, sess)?;
        }
        Ok(h)
    }
    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.0.iter_mut().rev() {
            g = l.backward(&g, sess)?;
        }
        Ok(g)
    }
}
