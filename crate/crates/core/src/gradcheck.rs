//! Central finite-difference oracle for every backward pass, run in `f64`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Block, BlockKind, SeUnit, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::layer::{Dropout, GlobalAvgPool, GlobalMaxPool, MaxPool, Relu, Sigmoid};
use crate::tensor::{BatchNormParams, ConvParams, DenseParams, Layer, Parameterized, Session, Shape, Tensor};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so coordinates with near-zero
/// gradient are compared absolutely at this scale.
pub const REL_FLOOR: f64 = 1e-6;
/// Tolerance for plain primitives.
pub const TOL_PRIMITIVE: f64 = 1e-4;
/// Tolerance for anything containing batch norm.
pub const TOL_BATCHNORM: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub max_rel_error: f64,
    /// Coordinate with the worst error, in the checked vector.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates re-probed with a smaller step because of a nearby kink.
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op={} checked={} kinks={} max_rel_err={:.3e} worst_index={} tol={:.0e} pass={}",
            self.label,
            self.checked,
            self.kinks,
            self.max_rel_error,
            self.worst_index,
            self.tolerance,
            self.passed
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around `point`.
///
/// A coordinate that misses `tolerance` while its forward and backward
/// one-sided slopes also disagree sits within one step of a ReLU or
/// max-pool kink. It is re-probed at `FD_STEP / 10` and `FD_STEP / 100`, and
/// the step whose one-sided slopes agree best supplies the estimate. Such
/// coordinates are counted in `kinks`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if point.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "grad_check: {} coordinates but {} analytic gradients",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let center = finite(loss(&x)?, "at the unperturbed point")?;
    let mut worst = (0.0f64, 0usize);
    let mut kinks = 0;
    for i in 0..x.len() {
        let mut est = probe(&mut loss, &mut x, i, FD_STEP, center)?;
        if relative_error(analytic[i], est.central) >= tolerance && est.asymmetry > tolerance {
            kinks += 1;
            for refine in [10.0, 100.0] {
                let e = probe(&mut loss, &mut x, i, FD_STEP / refine, center)?;
                if e.asymmetry < est.asymmetry {
                    est = e;
                }
            }
        }
        let err = relative_error(analytic[i], est.central);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        label: String::new(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: x.len(),
        kinks,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

struct Estimate {
    central: f64,
    /// Relative disagreement of the two one-sided slopes.
    asymmetry: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Oracle(format!("non-finite loss {v} {what}")))
    }
}

fn probe(
    loss: &mut impl FnMut(&[f64]) -> Result<f64>,
    x: &mut [f64],
    i: usize,
    step: f64,
    center: f64,
) -> Result<Estimate> {
    let orig = x[i];
    x[i] = orig + step;
    let up = loss(x);
    x[i] = orig - step;
    let down = loss(x);
    x[i] = orig;
    let what = format!("while perturbing coordinate {i}");
    let (up, down) = (finite(up?, &what)?, finite(down?, &what)?);
    Ok(Estimate {
        central: (up - down) / (2.0 * step),
        asymmetry: relative_error((up - center) / step, (center - down) / step),
    })
}

/// Scalar objective on a layer output: returns the loss and its gradient
/// with respect to the output.
pub type Objective<'a> = dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + 'a;

/// `sum(r ⊙ y)` for a fixed random `r` (drawn on first use for the output
/// shape), a generic way to turn any layer into a scalar function.
pub fn random_projection(seed: u64) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    move |y: &Tensor<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::from_fn(y.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
        let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((loss, r))
    }
}

/// Options for [`check_layer`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub tolerance: f64,
    /// Seed of the session RNG; reused on every evaluation so dropout masks
    /// are identical across perturbations.
    pub session_seed: u64,
    /// Multiplies the analytic gradient by `1 + corrupt`; negative control.
    pub corrupt: f64,
    pub check_input: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            tolerance: TOL_PRIMITIVE,
            session_seed: 0,
            corrupt: 0.0,
            check_input: true,
        }
    }
}

/// Gradient-checks every trainable parameter of `layer` (and the input,
/// when requested) in train mode.
pub fn check_layer<L: Layer<f64> + ?Sized>(
    label: &str,
    layer: &mut L,
    x: &Tensor<f64>,
    objective: &Objective<'_>,
    opts: CheckOptions,
) -> Result<GradCheckReport> {
    layer.zero_grad();
    let mut sess = Session::train(opts.session_seed);
    let y = layer.forward(x, &mut sess)?;
    let (_, dy) = objective(&y)?;
    let dx = layer.backward(&dy, &mut sess)?;
    if !sess.tape.is_empty() {
        return Err(Error::State(format!(
            "{label}: {} tape records left after backward",
            sess.tape.len()
        )));
    }

    let theta = layer.flat_values();
    let n_params = theta.len();
    let mut point = theta.clone();
    let mut analytic = layer.flat_grads();
    if opts.check_input {
        point.extend_from_slice(x.data());
        analytic.extend_from_slice(dx.data());
    }
    analytic.iter_mut().for_each(|g| *g *= 1.0 + opts.corrupt);

    let shape = x.shape();
    let mut report = grad_check(
        |p| {
            layer.set_flat_values(&p[..n_params])?;
            let input = if opts.check_input {
                Tensor::new(shape, p[n_params..].to_vec())?
            } else {
                x.clone()
            };
            let mut s = Session::train(opts.session_seed);
            s.tape = crate::tensor::GradTape::disabled();
            let y = layer.forward(&input, &mut s)?;
            Ok(objective(&y)?.0)
        },
        &point,
        &analytic,
        opts.tolerance,
    )?;
    layer.set_flat_values(&theta)?;
    report.label = label.to_string();
    Ok(report)
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Nudges every trainable value by a small random amount so that zero
/// biases and identity batch norm do not hide broken gradients.
fn jitter<L: Parameterized<f64> + ?Sized>(layer: &mut L, rng: &mut ChaCha8Rng) {
    layer.visit_mut("", &mut |_, p| {
        if p.is_trainable() {
            p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    });
}

/// Checks every primitive's backward pass against central differences.
pub fn primitive_suite(seed: u64, corrupt: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = random_projection(seed ^ 0x5eed);
    let opts = CheckOptions {
        corrupt,
        session_seed: seed,
        ..CheckOptions::default()
    };
    let bn_opts = CheckOptions {
        tolerance: TOL_BATCHNORM,
        ..opts
    };
    let x = random_tensor(Shape::new(2, 9, 3), &mut rng);
    let flat = random_tensor(Shape::new(2, 1, 5), &mut rng);
    let mut reports = Vec::new();

    for (label, stride, pad, kernel) in [
        ("conv1d_k3_s1_p1", 1, 1, 3),
        ("conv1d_k3_s3_p0", 3, 0, 3),
        ("conv1d_k1", 1, 0, 1),
    ] {
        let mut conv = ConvParams::new(3, 4, kernel, stride, pad)?;
        conv.init_he_uniform(&mut rng);
        jitter(&mut conv, &mut rng);
        reports.push(check_layer(label, &mut conv, &x, &objective, opts)?);
    }
    let mut dense = DenseParams::new(5, 4)?;
    dense.init_he_uniform(&mut rng);
    jitter(&mut dense, &mut rng);
    reports.push(check_layer("dense", &mut dense, &flat, &objective, opts)?);
    let mut bn = BatchNormParams::new(3);
    jitter(&mut bn, &mut rng);
    reports.push(check_layer("batchnorm1d", &mut bn, &x, &objective, bn_opts)?);
    reports.push(check_layer("relu", &mut Relu, &x, &objective, opts)?);
    reports.push(check_layer("sigmoid", &mut Sigmoid, &x, &objective, opts)?);
    reports.push(check_layer("maxpool1d", &mut MaxPool(3), &x, &objective, opts)?);
    reports.push(check_layer("global_max_pool", &mut GlobalMaxPool, &x, &objective, opts)?);
    reports.push(check_layer("global_avg_pool", &mut GlobalAvgPool, &x, &objective, opts)?);
    reports.push(check_layer("dropout", &mut Dropout(0.3), &x, &objective, opts)?);
    let mut se = SeUnit::new(3, 2.0)?;
    se.init(&mut rng);
    jitter(&mut se, &mut rng);
    reports.push(check_layer("se_unit", &mut se, &x, &objective, opts)?);
    Ok(reports)
}

/// Checks one block of `kind` on a `1 × 27 × 4` input, with equal channel
/// counts and, for residual kinds, with a projection shortcut (4 → 6).
pub fn block_suite(kind: BlockKind, seed: u64, corrupt: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = random_projection(seed ^ 0xb10c);
    let opts = CheckOptions {
        tolerance: TOL_BATCHNORM,
        corrupt,
        session_seed: seed,
        check_input: true,
    };
    let x = random_tensor(Shape::new(1, 27, 4), &mut rng);
    let mut widths = vec![4];
    if kind.is_residual() {
        widths.push(6);
    }
    let mut reports = Vec::new();
    for cout in widths {
        let mut block = Block::new(kind, 4, cout, DEFAULT_ALPHA)?;
        block.init(&mut rng);
        jitter(&mut block, &mut rng);
        let label = format!("block_{kind}_4to{cout}");
        reports.push(check_layer(&label, &mut block, &x, &objective, opts)?);
    }
    Ok(reports)
}

/// End-to-end check of a depth-`depth` network of `kind` blocks (4 channels,
/// 3 tags, batch 4, head dropout 0.5) on a random projection of the output
/// probabilities. The training loss is left out because its clamp makes it
/// flat wherever a prediction saturates.
pub fn model_check(kind: BlockKind, depth: usize, seed: u64, corrupt: f64) -> Result<GradCheckReport> {
    const BATCH: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        dropout_head: 0.5,
        ..ModelConfig::desk(kind, depth, 4, 3)
    };
    let mut net = Network::<f64>::build(config.clone(), seed)?;
    jitter(&mut net, &mut rng);
    let x = random_tensor(Shape::new(BATCH, config.input_len, 1), &mut rng);
    let objective = random_projection(seed ^ 0x4ead);
    let opts = CheckOptions {
        tolerance: TOL_BATCHNORM,
        corrupt,
        session_seed: seed,
        check_input: false,
    };
    check_layer(&format!("network_{kind}_depth{depth}"), &mut net, &x, &objective, opts)
}
