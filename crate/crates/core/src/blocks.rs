//! The strided input layer and the Basic / SE / Res-n / ReSE-n blocks.
//!
//! Every block maps `(B, T, C_in)` to `(B, T/3, C_out)`:
//!
//! | kind   | body                                                                  |
//! |--------|-----------------------------------------------------------------------|
//! | Basic  | conv → BN → ReLU → maxpool(3)                                         |
//! | SE     | conv → BN → ReLU → SE → maxpool(3)                                    |
//! | Res-1  | maxpool(ReLU(conv → BN  +  shortcut))                                 |
//! | Res-2  | maxpool(ReLU(conv → BN → ReLU → dropout(0.2) → conv → BN  +  shortcut)) |
//! | ReSE-n | as Res-n with SE applied to the branch before the addition            |
//!
//! The shortcut is the identity when channel counts match and a learned
//! width-1 projection otherwise.
//!
//! Trainable parameter counts, with `h = max(1, round(α·C_out))`:
//!
//! - conv(k, i, o) = k·i·o + o, batch norm(c) = 2c, SE(C) = 2·C·h + h + C
//! - Basic = conv(3, C_in, C_out) + bn(C_out); SE = Basic + SE(C_out)
//! - Res-1 = conv(3, C_in, C_out) + bn(C_out) + proj
//! - Res-2 = Res-1 + conv(3, C_out, C_out) + bn(C_out)
//! - ReSE-n = Res-n + SE(C_out)
//! - proj = conv(1, C_in, C_out) if C_in ≠ C_out, else 0

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::layer::Layer;
use crate::tensor::ops;
use crate::tensor::param::join;
use crate::tensor::{BatchNormParams, ConvParams, DenseParams, Param, Parameterized, Real, Session, Tensor};

/// Default excitation expansion ratio.
pub const DEFAULT_ALPHA: f64 = 16.0;
/// Dropout between the two convolutions of Res-2 / ReSE-2.
pub const RES2_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Se,
    Res1,
    Res2,
    Rese1,
    Rese2,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Basic,
        BlockKind::Se,
        BlockKind::Res1,
        BlockKind::Res2,
        BlockKind::Rese1,
        BlockKind::Rese2,
    ];

    pub fn has_se(self) -> bool {
        matches!(self, BlockKind::Se | BlockKind::Rese1 | BlockKind::Rese2)
    }

    pub fn is_residual(self) -> bool {
        matches!(
            self,
            BlockKind::Res1 | BlockKind::Res2 | BlockKind::Rese1 | BlockKind::Rese2
        )
    }

    /// Number of convolutions on the main path.
    pub fn conv_count(self) -> usize {
        match self {
            BlockKind::Res2 | BlockKind::Rese2 => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Se => "se",
            BlockKind::Res1 => "res1",
            BlockKind::Res2 => "res2",
            BlockKind::Rese1 => "rese1",
            BlockKind::Rese2 => "rese2",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown block kind {s:?} (expected basic, se, res1, res2, rese1, rese2)"
                ))
            })
    }
}

pub fn se_hidden_dim(channels: usize, alpha: f64) -> usize {
    ((alpha * channels as f64).round() as usize).max(1)
}

pub fn conv_param_count(kernel: usize, cin: usize, cout: usize) -> usize {
    kernel * cin * cout + cout
}

pub fn se_param_count(channels: usize, alpha: f64) -> usize {
    let h = se_hidden_dim(channels, alpha);
    2 * channels * h + h + channels
}

/// Closed-form trainable parameter count of one block.
pub fn block_param_count(kind: BlockKind, cin: usize, cout: usize, alpha: f64) -> usize {
    let mut n = conv_param_count(3, cin, cout) + 2 * cout;
    if kind.conv_count() == 2 {
        n += conv_param_count(3, cout, cout) + 2 * cout;
    }
    if kind.is_residual() && cin != cout {
        n += conv_param_count(1, cin, cout);
    }
    if kind.has_se() {
        n += se_param_count(cout, alpha);
    }
    n
}

/// Squeeze-and-excitation unit with an expanding (not bottleneck) gate:
/// `s = sigmoid(fc2(relu(fc1(mean_t(u)))))`, output `u · s` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SeUnit<T> {
    pub fc1: DenseParams<T>,
    pub fc2: DenseParams<T>,
    pub alpha: f64,
    pub channels: usize,
}

impl<T: Real> SeUnit<T> {
    pub fn new(channels: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("SE expansion ratio must be positive, got {alpha}")));
        }
        let hidden = se_hidden_dim(channels, alpha);
        Ok(SeUnit {
            fc1: DenseParams::new(channels, hidden)?,
            fc2: DenseParams::new(hidden, channels)?,
            alpha,
            channels,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.fc1.init_he_uniform(rng);
        self.fc2.init_he_uniform(rng);
    }

    /// Zeroes the second FC layer so every gate is exactly 0.5.
    pub fn zero_gate(&mut self) {
        self.fc2.weight.value.iter_mut().for_each(|w| *w = T::zero());
        self.fc2.bias.value.iter_mut().for_each(|w| *w = T::zero());
    }

    pub fn cast<U: Real>(&self) -> SeUnit<U> {
        SeUnit {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            alpha: self.alpha,
            channels: self.channels,
        }
    }

    fn gate(&self, u: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let z = ops::global_avg_pool(u, &mut sess.tape)?;
        let h = ops::dense(&z, &self.fc1, &mut sess.tape)?;
        let h = ops::relu(&h, &mut sess.tape);
        let e = ops::dense(&h, &self.fc2, &mut sess.tape)?;
        Ok(ops::sigmoid(&e, &mut sess.tape))
    }
}

impl<T: Real> Parameterized<T> for SeUnit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl<T: Real> Layer<T> for SeUnit<T> {
    fn forward(&mut self, u: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        if u.shape().channels != self.channels {
            return Err(Error::Dimension(format!(
                "se_unit: input {} has {} channels, unit built for {}",
                u.shape(),
                u.shape().channels,
                self.channels
            )));
        }
        let s = self.gate(u, sess)?;
        if let Some(gates) = sess.gates.as_mut() {
            gates.push(s.clone());
        }
        ops::channel_scale(u, &s, &mut sess.tape)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let (mut gu, gs) = ops::channel_scale_backward(grad, &mut sess.tape)?;
        let ge = ops::sigmoid_backward(&gs, &mut sess.tape)?;
        let gh = self.fc2.backward(&ge, sess)?;
        let gh = ops::relu_backward(&gh, &mut sess.tape)?;
        let gz = self.fc1.backward(&gh, sess)?;
        let squeeze = ops::global_avg_pool_backward(&gz, &mut sess.tape)?;
        gu.add_assign(&squeeze)?;
        Ok(gu)
    }
}

/// The first layer: width-3 convolution with stride 3 and no padding, then
/// BN and ReLU. Divides time by 3.
#[derive(Clone, Debug, PartialEq)]
pub struct StridedInput<T> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

pub fn is_power_of_three(mut n: usize) -> bool {
    if n < 3 {
        return false;
    }
    while n.is_multiple_of(3) {
        n /= 3;
    }
    n == 1
}

impl<T: Real> StridedInput<T> {
    pub fn new(out_channels: usize) -> Result<Self> {
        Ok(StridedInput {
            conv: ConvParams::new(1, out_channels, 3, 3, 0)?,
            bn: BatchNormParams::new(out_channels),
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.conv.init_he_uniform(rng);
    }

    pub fn cast<U: Real>(&self) -> StridedInput<U> {
        StridedInput {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
        }
    }
}

impl<T: Real> Parameterized<T> for StridedInput<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

impl<T: Real> Layer<T> for StridedInput<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let t = x.shape().time;
        if !is_power_of_three(t) {
            return Err(Error::Config(format!(
                "strided input needs a power-of-3 length, got {t}"
            )));
        }
        let h = ops::conv1d(x, &self.conv, &mut sess.tape)?;
        let h = ops::batchnorm1d(&h, &mut self.bn, sess.mode, &mut sess.tape)?;
        Ok(ops::relu(&h, &mut sess.tape))
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::relu_backward(grad, &mut sess.tape)?;
        let g = self.bn.backward(&g, sess)?;
        self.conv.backward(&g, sess)
    }
}

/// One building block; which fields are present depends on `kind`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv1: ConvParams<T>,
    pub bn1: BatchNormParams<T>,
    pub conv2: Option<ConvParams<T>>,
    pub bn2: Option<BatchNormParams<T>>,
    pub se: Option<SeUnit<T>>,
    /// Width-1 projection on the skip path, present iff a residual block
    /// changes the channel count.
    pub shortcut: Option<ConvParams<T>>,
    pub dropout_rate: f64,
}

impl<T: Real> Block<T> {
    /// Builds a block with zero weights and identity batch norm.
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, alpha: f64) -> Result<Self> {
        let two = kind.conv_count() == 2;
        Ok(Block {
            kind,
            in_channels,
            out_channels,
            conv1: ConvParams::new(in_channels, out_channels, 3, 1, 1)?,
            bn1: BatchNormParams::new(out_channels),
            conv2: if two {
                Some(ConvParams::new(out_channels, out_channels, 3, 1, 1)?)
            } else {
                None
            },
            bn2: two.then(|| BatchNormParams::new(out_channels)),
            se: if kind.has_se() {
                Some(SeUnit::new(out_channels, alpha)?)
            } else {
                None
            },
            shortcut: if kind.is_residual() && in_channels != out_channels {
                Some(ConvParams::new(in_channels, out_channels, 1, 1, 0)?)
            } else {
                None
            },
            dropout_rate: if two { RES2_DROPOUT } else { 0.0 },
        })
    }

    /// He-uniform conv and FC weights.
    pub fn init(&mut self, rng: &mut impl Rng) {
        self.conv1.init_he_uniform(rng);
        if let Some(c) = self.conv2.as_mut() {
            c.init_he_uniform(rng);
        }
        if let Some(se) = self.se.as_mut() {
            se.init(rng);
        }
        if let Some(p) = self.shortcut.as_mut() {
            p.init_he_uniform(rng);
        }
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            kind: self.kind,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            conv1: self.conv1.cast(),
            bn1: self.bn1.cast(),
            conv2: self.conv2.as_ref().map(ConvParams::cast),
            bn2: self.bn2.as_ref().map(BatchNormParams::cast),
            se: self.se.as_ref().map(SeUnit::cast),
            shortcut: self.shortcut.as_ref().map(ConvParams::cast),
            dropout_rate: self.dropout_rate,
        }
    }

    /// Residual branch up to (and including) the optional SE unit.
    fn branch_forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let mut h = ops::conv1d(x, &self.conv1, &mut sess.tape)?;
        h = ops::batchnorm1d(&h, &mut self.bn1, sess.mode, &mut sess.tape)?;
        if let (Some(conv2), Some(bn2)) = (self.conv2.as_ref(), self.bn2.as_mut()) {
            h = ops::relu(&h, &mut sess.tape);
            h = ops::dropout(&h, self.dropout_rate, sess.mode, &mut sess.rng, &mut sess.tape)?;
            h = ops::conv1d(&h, conv2, &mut sess.tape)?;
            h = ops::batchnorm1d(&h, bn2, sess.mode, &mut sess.tape)?;
        }
        if let Some(se) = self.se.as_mut() {
            h = se.forward(&h, sess)?;
        }
        Ok(h)
    }

    fn branch_backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        if let Some(se) = self.se.as_mut() {
            g = se.backward(&g, sess)?;
        }
        if let (Some(conv2), Some(bn2)) = (self.conv2.as_mut(), self.bn2.as_mut()) {
            g = bn2.backward(&g, sess)?;
            g = conv2.backward(&g, sess)?;
            g = ops::dropout_backward(&g, &mut sess.tape)?;
            g = ops::relu_backward(&g, &mut sess.tape)?;
        }
        g = self.bn1.backward(&g, sess)?;
        self.conv1.backward(&g, sess)
    }
}

impl<T: Real> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        if let Some(c) = &self.conv2 {
            c.visit(&join(prefix, "conv2"), f);
        }
        if let Some(b) = &self.bn2 {
            b.visit(&join(prefix, "bn2"), f);
        }
        if let Some(se) = &self.se {
            se.visit(&join(prefix, "se"), f);
        }
        if let Some(p) = &self.shortcut {
            p.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        if let Some(c) = &mut self.conv2 {
            c.visit_mut(&join(prefix, "conv2"), f);
        }
        if let Some(b) = &mut self.bn2 {
            b.visit_mut(&join(prefix, "bn2"), f);
        }
        if let Some(se) = &mut self.se {
            se.visit_mut(&join(prefix, "se"), f);
        }
        if let Some(p) = &mut self.shortcut {
            p.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

impl<T: Real> Layer<T> for Block<T> {
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if !xs.time.is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "{} block: time {} of input {xs} not divisible by 3",
                self.kind, xs.time
            )));
        }
        if !self.kind.is_residual() {
            let mut h = ops::conv1d(x, &self.conv1, &mut sess.tape)?;
            h = ops::batchnorm1d(&h, &mut self.bn1, sess.mode, &mut sess.tape)?;
            h = ops::relu(&h, &mut sess.tape);
            if let Some(se) = self.se.as_mut() {
                h = se.forward(&h, sess)?;
            }
            return ops::maxpool1d(&h, 3, &mut sess.tape);
        }
        let branch = self.branch_forward(x, sess)?;
        let skip = match &self.shortcut {
            Some(proj) => ops::conv1d(x, proj, &mut sess.tape)?,
            None => x.clone(),
        };
        if branch.shape() != skip.shape() {
            return Err(Error::State(format!(
                "{} block: branch {} and shortcut {} disagree",
                self.kind,
                branch.shape(),
                skip.shape()
            )));
        }
        let h = ops::relu(&branch.add(&skip)?, &mut sess.tape);
        ops::maxpool1d(&h, 3, &mut sess.tape)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::maxpool1d_backward(grad, &mut sess.tape)?;
        if !self.kind.is_residual() {
            let mut g = g;
            if let Some(se) = self.se.as_mut() {
                g = se.backward(&g, sess)?;
            }
            g = ops::relu_backward(&g, &mut sess.tape)?;
            g = self.bn1.backward(&g, sess)?;
            return self.conv1.backward(&g, sess);
        }
        let g = ops::relu_backward(&g, &mut sess.tape)?;
        let g_skip = match self.shortcut.as_mut() {
            Some(proj) => proj.backward(&g, sess)?,
            None => g.clone(),
        };
        let mut gx = self.branch_backward(&g, sess)?;
        gx.add_assign(&g_skip)?;
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Mode, Shape};

    fn eval() -> Session<f64> {
        Session::new(Mode::Eval, false, 0)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn built(kind: BlockKind, cin: usize, cout: usize, seed: u64) -> Block<f64> {
        let mut b = Block::new(kind, cin, cout, DEFAULT_ALPHA).unwrap();
        b.init(&mut ChaCha8Rng::seed_from_u64(seed));
        b
    }

    #[test]
    fn strided_input_divides_time_by_three() {
        let mut layer = StridedInput::<f32>::new(2).unwrap();
        for (t, expect) in [(59_049, 19_683), (2187, 729)] {
            let y = layer
                .forward(&Tensor::zeros(Shape::new(1, t, 1)), &mut Session::new(Mode::Eval, false, 0))
                .unwrap();
            assert_eq!(y.shape(), Shape::new(1, expect, 2));
        }
        let err = layer
            .forward(&Tensor::zeros(Shape::new(1, 2000, 1)), &mut Session::new(Mode::Eval, false, 0))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strided_input_on_silence_is_relu_of_bias_path() {
        let mut layer = StridedInput::<f64>::new(2).unwrap();
        layer.init(&mut ChaCha8Rng::seed_from_u64(1));
        layer.bn.beta.value = vec![0.5, -0.5];
        let y = layer.forward(&Tensor::zeros(Shape::new(1, 27, 1)), &mut eval()).unwrap();
        assert!(y.is_finite());
        for row in y.data().chunks(2) {
            assert_eq!(row, [0.5, 0.0]);
        }
    }

    #[test]
    fn every_block_maps_shape() {
        for kind in BlockKind::ALL {
            for (cin, cout) in [(4, 4), (3, 5)] {
                let mut b = built(kind, cin, cout, 2);
                let y = b.forward(&random(Shape::new(2, 27, cin), 3), &mut eval()).unwrap();
                assert_eq!(y.shape(), Shape::new(2, 9, cout), "{kind}");
            }
        }
        let mut b = built(BlockKind::Basic, 4, 4, 2);
        assert!(matches!(
            b.forward(&random(Shape::new(1, 10, 4), 3), &mut eval()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn basic_block_full_width_shape() {
        let mut b = Block::<f32>::new(BlockKind::Basic, 128, 128, DEFAULT_ALPHA).unwrap();
        let y = b
            .forward(&Tensor::zeros(Shape::new(1, 729, 128)), &mut Session::new(Mode::Eval, false, 0))
            .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 243, 128));
    }

    #[test]
    fn zero_conv_with_unit_beta_gives_ones() {
        let mut b = Block::<f64>::new(BlockKind::Basic, 3, 4, DEFAULT_ALPHA).unwrap();
        b.bn1.beta.value = vec![1.0; 4];
        let y = b.forward(&random(Shape::new(2, 9, 3), 4), &mut Session::train(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn se_unit_zero_gate_halves_input() {
        let mut se = SeUnit::<f64>::new(4, DEFAULT_ALPHA).unwrap();
        se.init(&mut ChaCha8Rng::seed_from_u64(5));
        se.zero_gate();
        let u = random(Shape::new(2, 6, 4), 6);
        let y = se.forward(&u, &mut eval()).unwrap();
        assert_eq!(y, u.scale(0.5));
    }

    #[test]
    fn se_unit_expands_by_alpha() {
        assert_eq!(SeUnit::<f32>::new(128, DEFAULT_ALPHA).unwrap().hidden_dim(), 2048);
        assert_eq!(se_hidden_dim(1, 0.1), 1);
    }

    #[test]
    fn se_gates_stay_inside_unit_interval() {
        let mut se = SeUnit::<f32>::new(3, 2.0).unwrap();
        se.init(&mut ChaCha8Rng::seed_from_u64(7));
        se.fc2.bias.value = vec![80.0, -80.0, 0.0];
        let u = Tensor::from_fn(Shape::new(1, 3, 3), |_, t, c| (t * 3 + c) as f32 * 100.0);
        let mut sess = Session::new(Mode::Eval, false, 0).capturing_gates();
        se.forward(&u, &mut sess).unwrap();
        let gates = sess.gates.unwrap();
        assert_eq!(gates.len(), 1);
        assert!(gates[0].data().iter().all(|&s| s > 0.0 && s < 1.0), "{:?}", gates[0]);
    }

    #[test]
    fn saturated_se_block_matches_basic() {
        let mut se = built(BlockKind::Se, 3, 4, 8);
        se.se.as_mut().unwrap().fc2.bias.value = vec![20.0; 4];
        let mut basic = Block::new(BlockKind::Basic, 3, 4, DEFAULT_ALPHA).unwrap();
        basic.conv1 = se.conv1.clone();
        basic.bn1 = se.bn1.clone();
        let x = random(Shape::new(2, 27, 3), 9);
        let a = se.forward(&x, &mut eval()).unwrap();
        let b = basic.forward(&x, &mut eval()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-4 * q.abs().max(1.0));
        }
    }

    #[test]
    fn res1_with_zero_branch_is_pooled_relu() {
        let mut b = Block::<f64>::new(BlockKind::Res1, 1, 1, DEFAULT_ALPHA).unwrap();
        let y = b.forward(&Tensor::from_series(&[1.0, -2.0, 3.0]), &mut eval()).unwrap();
        assert_eq!(y.data(), [3.0]);

        let mut b = Block::<f64>::new(BlockKind::Res1, 4, 4, DEFAULT_ALPHA).unwrap();
        let x = random(Shape::new(2, 27, 4), 10);
        let y = b.forward(&x, &mut eval()).unwrap();
        let expect = ops::maxpool1d(&ops::relu(&x, &mut crate::tensor::GradTape::disabled()), 3, &mut crate::tensor::GradTape::disabled()).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn two_conv_blocks_carry_one_dropout() {
        for kind in BlockKind::ALL {
            let mut b = built(kind, 4, 4, 11);
            let mut sess = Session::train(1);
            b.forward(&random(Shape::new(1, 27, 4), 12), &mut sess).unwrap();
            let dropouts = sess.tape.op_names().iter().filter(|n| **n == "dropout").count();
            let expect = usize::from(kind.conv_count() == 2);
            assert_eq!(dropouts, expect, "{kind}");
            if expect == 1 {
                assert_eq!(b.dropout_rate, RES2_DROPOUT);
                assert_eq!(RES2_DROPOUT, 0.2);
            }
        }
    }

    #[test]
    fn rese_with_half_gate_scales_the_branch() {
        let mut b = built(BlockKind::Rese1, 4, 4, 13);
        b.se.as_mut().unwrap().zero_gate();
        let x = random(Shape::new(2, 27, 4), 14);
        let y = b.forward(&x, &mut eval()).unwrap();

        let mut off = crate::tensor::GradTape::disabled();
        let branch = ops::conv1d(&x, &b.conv1, &mut off).unwrap();
        let branch = ops::batchnorm1d(&branch, &mut b.bn1.clone(), Mode::Eval, &mut off).unwrap();
        let sum = branch.scale(0.5).add(&x).unwrap();
        let expect = ops::maxpool1d(&ops::relu(&sum, &mut off), 3, &mut off).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn parameter_counts_match_formulas() {
        for kind in BlockKind::ALL {
            for (cin, cout) in [(4, 4), (3, 6), (128, 256)] {
                let b = Block::<f32>::new(kind, cin, cout, DEFAULT_ALPHA).unwrap();
                assert_eq!(b.param_count(), block_param_count(kind, cin, cout, DEFAULT_ALPHA), "{kind} {cin}->{cout}");
            }
        }
        // SE(128) at α = 16: 2·128·2048 + 2048 + 128.
        assert_eq!(se_param_count(128, 16.0), 526_464);
        assert_eq!(block_param_count(BlockKind::Basic, 128, 128, 16.0), 3 * 128 * 128 + 128 + 256);
    }

    #[test]
    fn kind_names_parse() {
        for kind in BlockKind::ALL {
            assert_eq!(kind.name().parse::<BlockKind>().unwrap(), kind);
        }
        assert_eq!("ReSE-2".parse::<BlockKind>().unwrap(), BlockKind::Rese2);
        assert!("dense".parse::<BlockKind>().is_err());
    }
}
