//! Differentiable primitives. Each forward pushes one [`Record`] on the tape
//! and each backward pops it, so composites must call backwards in exact
//! reverse order of their forwards.

use rand::Rng;

use super::param::{BatchNormParams, ConvParams, DenseParams};
use super::tape::{GradTape, Mode, Record};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Dot product with eight independent accumulators so the loop vectorizes
/// without reassociating a single running sum. Summation order is fixed, so
/// results are reproducible.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    /// `(out, in, kernel)` layout, matching [`ConvParams::weight`].
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Reorders `(out, in, kernel)` weights to `(kernel, out, in)` so the inner
/// loops run over contiguous input channels.
fn kernel_major<T: Real>(p: &ConvParams<T>) -> Vec<T> {
    let (o_n, i_n, k_n) = (p.out_channels, p.in_channels, p.kernel);
    let mut wt = vec![T::zero(); o_n * i_n * k_n];
    for o in 0..o_n {
        for i in 0..i_n {
            for k in 0..k_n {
                wt[(k * o_n + o) * i_n + i] = p.w(o, i, k);
            }
        }
    }
    wt
}

fn conv_out_len<T: Real>(x: Shape, p: &ConvParams<T>) -> Result<usize> {
    if x.channels != p.in_channels {
        return Err(Error::Dimension(format!(
            "conv1d: input {x} has {} channels, weights expect {} (weights {}x{}x{})",
            x.channels, p.in_channels, p.out_channels, p.in_channels, p.kernel
        )));
    }
    match p.output_len(x.time) {
        Some(n) if n >= 1 => Ok(n),
        _ => Err(Error::Dimension(format!(
            "conv1d: input {x} too short for kernel {} stride {} padding {}",
            p.kernel, p.stride, p.padding
        ))),
    }
}

/// Cross-correlation (no kernel flip) with zero padding, plus bias.
pub fn conv1d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let t_out = conv_out_len(xs, p)?;
    let (ci, co, kn) = (p.in_channels, p.out_channels, p.kernel);
    let wt = kernel_major(p);
    let mut out = vec![T::zero(); xs.batch * t_out * co];
    let xd = x.data();
    for b in 0..xs.batch {
        for to in 0..t_out {
            let row = &mut out[(b * t_out + to) * co..(b * t_out + to + 1) * co];
            row.copy_from_slice(&p.bias.value);
            for k in 0..kn {
                let ti = (to * p.stride + k) as isize - p.padding as isize;
                if ti < 0 || ti as usize >= xs.time {
                    continue;
                }
                let start = (b * xs.time + ti as usize) * ci;
                let xrow = &xd[start..start + ci];
                for (o, r) in row.iter_mut().enumerate() {
                    let w = &wt[(k * co + o) * ci..(k * co + o + 1) * ci];
                    *r += dot(w, xrow);
                }
            }
        }
    }
    tape.push(Record::Conv { input: x.clone() });
    Tensor::new(Shape::new(xs.batch, t_out, co), out)
}

pub fn conv1d_backward<T: Real>(
    grad_out: &Tensor<T>,
    p: &ConvParams<T>,
    tape: &mut GradTape<T>,
) -> Result<ConvGrads<T>> {
    let Record::Conv { input } = tape.pop("conv1d")? else {
        unreachable!()
    };
    let xs = input.shape();
    let gs = grad_out.shape();
    let t_out = conv_out_len(xs, p)?;
    if gs != Shape::new(xs.batch, t_out, p.out_channels) {
        return Err(Error::Dimension(format!(
            "conv1d backward: grad {gs} does not match forward output ({}x{}x{})",
            xs.batch, t_out, p.out_channels
        )));
    }
    let (ci, co, kn) = (p.in_channels, p.out_channels, p.kernel);
    let wt = kernel_major(p);
    let mut gx = vec![T::zero(); xs.len()];
    let mut gwt = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); co];
    let xd = input.data();
    let gd = grad_out.data();
    for b in 0..xs.batch {
        for to in 0..t_out {
            let grow = &gd[(b * t_out + to) * co..(b * t_out + to + 1) * co];
            for (acc, &g) in gb.iter_mut().zip(grow) {
                *acc += g;
            }
            for k in 0..kn {
                let ti = (to * p.stride + k) as isize - p.padding as isize;
                if ti < 0 || ti as usize >= xs.time {
                    continue;
                }
                let start = (b * xs.time + ti as usize) * ci;
                let xrow = &xd[start..start + ci];
                for (o, &g) in grow.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    let wi = (k * co + o) * ci;
                    axpy(&mut gx[start..start + ci], g, &wt[wi..wi + ci]);
                    axpy(&mut gwt[wi..wi + ci], g, xrow);
                }
            }
        }
    }
    let mut gw = vec![T::zero(); gwt.len()];
    for o in 0..co {
        for i in 0..ci {
            for k in 0..kn {
                gw[(o * ci + i) * kn + k] = gwt[(k * co + o) * ci + i];
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(xs, gx)?,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Windowed max over time; returns output and the flat input index of each
/// window's first maximum.
fn window_max<T: Real>(x: &Tensor<T>, window: usize) -> (Tensor<T>, Vec<usize>) {
    let xs = x.shape();
    let t_out = xs.time / window;
    let c = xs.channels;
    let mut out = Vec::with_capacity(xs.batch * t_out * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    let xd = x.data();
    for b in 0..xs.batch {
        for to in 0..t_out {
            let base = (b * xs.time + to * window) * c;
            for ch in 0..c {
                let mut best = base + ch;
                for w in 1..window {
                    let idx = base + w * c + ch;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new(Shape::new(xs.batch, t_out, c), out).expect("pool shape"),
        argmax,
    )
}

fn scatter<T: Real>(grad: &Tensor<T>, argmax: &[usize], input_shape: Shape, op: &str) -> Result<Tensor<T>> {
    if grad.data().len() != argmax.len() {
        return Err(Error::Dimension(format!(
            "{op} backward: grad {} does not match forward output size {}",
            grad.shape(),
            argmax.len()
        )));
    }
    let mut gx = vec![T::zero(); input_shape.len()];
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        gx[i] += g;
    }
    Tensor::new(input_shape, gx)
}

/// Non-overlapping max pooling over time. Ties go to the first index.
pub fn maxpool1d<T: Real>(x: &Tensor<T>, window: usize, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if window == 0 || !xs.time.is_multiple_of(window) {
        return Err(Error::Dimension(format!(
            "maxpool1d: time {} of {xs} not divisible by window {window}",
            xs.time
        )));
    }
    let (out, argmax) = window_max(x, window);
    tape.push(Record::MaxPool {
        argmax,
        input_shape: xs,
    });
    Ok(out)
}

pub fn maxpool1d_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::MaxPool { argmax, input_shape } = tape.pop("maxpool1d")? else {
        unreachable!()
    };
    scatter(grad_out, &argmax, input_shape, "maxpool1d")
}

pub fn global_max_pool<T: Real>(x: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.time == 0 {
        return Err(Error::Dimension(format!("global_max_pool: empty time axis in {xs}")));
    }
    let (out, argmax) = window_max(x, xs.time);
    tape.push(Record::GlobalMaxPool {
        argmax,
        input_shape: xs,
    });
    Ok(out)
}

pub fn global_max_pool_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::GlobalMaxPool { argmax, input_shape } = tape.pop("global_max_pool")? else {
        unreachable!()
    };
    scatter(grad_out, &argmax, input_shape, "global_max_pool")
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.time == 0 {
        return Err(Error::Dimension(format!("global_avg_pool: empty time axis in {xs}")));
    }
    let c = xs.channels;
    let inv = T::one() / T::of(xs.time as f64);
    let mut out = vec![T::zero(); xs.batch * c];
    for b in 0..xs.batch {
        let acc = &mut out[b * c..(b + 1) * c];
        for row in x.item(b).chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    tape.push(Record::GlobalAvgPool { input_shape: xs });
    Tensor::new(Shape::new(xs.batch, 1, c), out)
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::GlobalAvgPool { input_shape } = tape.pop("global_avg_pool")? else {
        unreachable!()
    };
    if grad_out.shape() != Shape::new(input_shape.batch, 1, input_shape.channels) {
        return Err(Error::Dimension(format!(
            "global_avg_pool backward: grad {} for input {input_shape}",
            grad_out.shape()
        )));
    }
    let inv = T::one() / T::of(input_shape.time as f64);
    Ok(Tensor::from_fn(input_shape, |b, _, c| grad_out.get(b, 0, c) * inv))
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// `W·x + b` applied to every `(batch, time)` row.
pub fn dense<T: Real>(x: &Tensor<T>, p: &DenseParams<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.channels != p.in_dim {
        return Err(Error::Dimension(format!(
            "dense: input {xs} has width {}, layer is {}->{}",
            xs.channels, p.in_dim, p.out_dim
        )));
    }
    let rows = xs.batch * xs.time;
    let mut out = Vec::with_capacity(rows * p.out_dim);
    for xr in x.data().chunks_exact(p.in_dim) {
        for o in 0..p.out_dim {
            let w = &p.weight.value[o * p.in_dim..(o + 1) * p.in_dim];
            out.push(p.bias.value[o] + dot(w, xr));
        }
    }
    tape.push(Record::Dense { input: x.clone() });
    Tensor::new(Shape::new(xs.batch, xs.time, p.out_dim), out)
}

pub fn dense_backward<T: Real>(
    grad_out: &Tensor<T>,
    p: &DenseParams<T>,
    tape: &mut GradTape<T>,
) -> Result<DenseGrads<T>> {
    let Record::Dense { input } = tape.pop("dense")? else {
        unreachable!()
    };
    let xs = input.shape();
    if grad_out.shape() != Shape::new(xs.batch, xs.time, p.out_dim) {
        return Err(Error::Dimension(format!(
            "dense backward: grad {} for input {xs} and layer {}->{}",
            grad_out.shape(),
            p.in_dim,
            p.out_dim
        )));
    }
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); p.weight.len()];
    let mut gb = vec![T::zero(); p.out_dim];
    for ((gr, xr), gxr) in grad_out
        .data()
        .chunks_exact(p.out_dim)
        .zip(input.data().chunks_exact(p.in_dim))
        .zip(gx.chunks_exact_mut(p.in_dim))
    {
        for (o, &g) in gr.iter().enumerate() {
            gb[o] += g;
            if g == T::zero() {
                continue;
            }
            let range = o * p.in_dim..(o + 1) * p.in_dim;
            axpy(gxr, g, &p.weight.value[range.clone()]);
            axpy(&mut gw[range], g, xr);
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(xs, gx)?,
        weight: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Per-channel normalization over all `(batch, time)` positions. Train mode
/// uses batch statistics and updates the running estimates; eval mode uses
/// the running estimates only.
pub fn batchnorm1d<T: Real>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
    tape: &mut GradTape<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let c = xs.channels;
    if c != p.channels {
        return Err(Error::Dimension(format!(
            "batchnorm1d: input {xs} has {} channels, params have {}",
            c, p.channels
        )));
    }
    let n = xs.batch * xs.time;
    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::State(format!(
                    "batchnorm1d in train mode needs at least 2 values per channel, input is {xs}"
                )));
            }
            let mut mean = vec![0.0; c];
            for row in x.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in x.data().chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.f64() - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let mom = p.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                let rm = &mut p.running_mean.value[ch];
                *rm = T::of((1.0 - mom) * rm.f64() + mom * mean[ch]);
                let rv = &mut p.running_var.value[ch];
                *rv = T::of((1.0 - mom) * rv.f64() + mom * var[ch] * unbias);
            }
            let inv = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            (mean, inv)
        }
        Mode::Eval => (
            p.running_mean.value.iter().map(|v| v.f64()).collect(),
            p.running_var
                .value
                .iter()
                .map(|v| 1.0 / (v.f64() + p.eps).sqrt())
                .collect(),
        ),
    };
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let inv_t: Vec<T> = inv_std.iter().map(|&s| T::of(s)).collect();
    let mut normalized = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean_t[ch]) * inv_t[ch];
            normalized.push(h);
            out.push(p.gamma.value[ch] * h + p.beta.value[ch]);
        }
    }
    tape.push(Record::BatchNorm {
        normalized: Tensor::new(xs, normalized)?,
        inv_std: inv_t,
        mode,
    });
    Tensor::new(xs, out)
}

pub fn batchnorm1d_backward<T: Real>(
    grad_out: &Tensor<T>,
    p: &BatchNormParams<T>,
    tape: &mut GradTape<T>,
) -> Result<BatchNormGrads<T>> {
    let Record::BatchNorm {
        normalized,
        inv_std,
        mode,
    } = tape.pop("batchnorm1d")?
    else {
        unreachable!()
    };
    let xs = normalized.shape();
    grad_out.expect_same_shape(&normalized, "batchnorm1d backward")?;
    let c = xs.channels;
    let n = T::of((xs.batch * xs.time) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gh = vec![T::zero(); c];
    for (gr, hr) in grad_out.data().chunks_exact(c).zip(normalized.data().chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] += gr[ch];
            sum_gh[ch] += gr[ch] * hr[ch];
        }
    }
    let mut gx = Vec::with_capacity(xs.len());
    for (gr, hr) in grad_out.data().chunks_exact(c).zip(normalized.data().chunks_exact(c)) {
        for ch in 0..c {
            let scale = p.gamma.value[ch] * inv_std[ch];
            let g = match mode {
                Mode::Train => scale / n * (n * gr[ch] - sum_g[ch] - hr[ch] * sum_gh[ch]),
                Mode::Eval => scale * gr[ch],
            };
            gx.push(g);
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(xs, gx)?,
        gamma: sum_gh,
        beta: sum_g,
    })
}

// ---------------------------------------------------------------------------
// Activations, dropout, channel scaling
// ---------------------------------------------------------------------------

pub fn relu<T: Real>(x: &Tensor<T>, tape: &mut GradTape<T>) -> Tensor<T> {
    let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
    tape.push(Record::Relu { output: out.clone() });
    out
}

/// Subgradient 0 at 0.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::Relu { output } = tape.pop("relu")? else {
        unreachable!()
    };
    grad_out.expect_same_shape(&output, "relu backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape(), data)
}

/// Logistic function, clamped so outputs stay strictly inside (0, 1) even
/// where the exact value rounds to 0 or 1.
#[inline]
pub fn logistic<T: Real>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>, tape: &mut GradTape<T>) -> Tensor<T> {
    let out = x.map(logistic);
    tape.push(Record::Sigmoid { output: out.clone() });
    out
}

pub fn sigmoid_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::Sigmoid { output } = tape.pop("sigmoid")? else {
        unreachable!()
    };
    grad_out.expect_same_shape(&output, "sigmoid backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::new(output.shape(), data)
}

/// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Identity in
/// eval mode and for `rate == 0`, without drawing from the RNG.
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
    tape: &mut GradTape<T>,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        tape.push(Record::Dropout { mask: None });
        return Ok(x.clone());
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    tape.push(Record::Dropout { mask: Some(mask) });
    Tensor::new(x.shape(), data)
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let Record::Dropout { mask } = tape.pop("dropout")? else {
        unreachable!()
    };
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.len() != grad_out.data().len() {
                return Err(Error::Dimension(format!(
                    "dropout backward: grad {} does not match mask of {} entries",
                    grad_out.shape(),
                    mask.len()
                )));
            }
            let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            Tensor::new(grad_out.shape(), data)
        }
    }
}

/// Scales every time step of channel `c` in item `b` by `gate[b, 0, c]`.
pub fn channel_scale<T: Real>(u: &Tensor<T>, gate: &Tensor<T>, tape: &mut GradTape<T>) -> Result<Tensor<T>> {
    let us = u.shape();
    if gate.shape() != Shape::new(us.batch, 1, us.channels) {
        return Err(Error::Dimension(format!(
            "channel_scale: gate {} does not fit input {us}",
            gate.shape()
        )));
    }
    let c = us.channels;
    let mut out = Vec::with_capacity(us.len());
    for b in 0..us.batch {
        let g = gate.row(b);
        for row in u.item(b).chunks_exact(c) {
            out.extend(row.iter().zip(g).map(|(&v, &s)| v * s));
        }
    }
    tape.push(Record::ChannelScale {
        input: u.clone(),
        gate: gate.clone(),
    });
    Tensor::new(us, out)
}

/// Returns `(grad_input, grad_gate)`.
pub fn channel_scale_backward<T: Real>(
    grad_out: &Tensor<T>,
    tape: &mut GradTape<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let Record::ChannelScale { input, gate } = tape.pop("channel_scale")? else {
        unreachable!()
    };
    grad_out.expect_same_shape(&input, "channel_scale backward")?;
    let us = input.shape();
    let c = us.channels;
    let mut gu = Vec::with_capacity(us.len());
    let mut gg = vec![T::zero(); us.batch * c];
    for b in 0..us.batch {
        let g = gate.row(b);
        let acc = &mut gg[b * c..(b + 1) * c];
        for (gr, ur) in grad_out.item(b).chunks_exact(c).zip(input.item(b).chunks_exact(c)) {
            for ch in 0..c {
                gu.push(gr[ch] * g[ch]);
                acc[ch] += gr[ch] * ur[ch];
            }
        }
    }
    Ok((Tensor::new(us, gu)?, Tensor::new(gate.shape(), gg)?))
}
