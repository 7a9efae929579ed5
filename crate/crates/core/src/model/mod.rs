//! Whole-network assembly: strided input layer, `depth` blocks, optional
//! multi-level aggregation of the last three blocks, and a two-layer FC head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Block, BlockKind, StridedInput, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::tensor::layer::Layer;
use crate::tensor::param::join;
use crate::tensor::{ops, DenseParams, Param, Parameterized, Real, Session, Shape, Tensor};

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Block output channels at full scale, one entry per block.
pub const DEFAULT_SCHEDULE: [usize; 9] = [128, 128, 128, 256, 256, 256, 256, 512, 512];

/// Number of trailing blocks aggregated by the multi-level head.
pub const AGGREGATED_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub block_kind: BlockKind,
    pub depth: usize,
    /// Samples per segment; always `3^(depth + 1)`.
    pub input_len: usize,
    pub strided_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub alpha: f64,
    pub multi_level: bool,
    pub head_hidden: usize,
    pub num_tags: usize,
    pub dropout_head: f64,
    pub weight_decay: f64,
    /// Tag names in output order; empty when unnamed.
    #[serde(default)]
    pub tags: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_kind: BlockKind::Se,
            depth: 9,
            input_len: 59049,
            strided_channels: 128,
            channel_schedule: DEFAULT_SCHEDULE.to_vec(),
            alpha: DEFAULT_ALPHA,
            multi_level: true,
            head_hidden: 512,
            num_tags: 50,
            dropout_head: 0.5,
            weight_decay: 0.0,
            tags: Vec::new(),
        }
    }
}

pub fn input_len_for_depth(depth: usize) -> usize {
    3usize.pow(depth as u32 + 1)
}

impl ModelConfig {
    /// Small network with every block at `channels` width.
    pub fn desk(kind: BlockKind, depth: usize, channels: usize, num_tags: usize) -> Self {
        ModelConfig {
            block_kind: kind,
            depth,
            input_len: input_len_for_depth(depth),
            strided_channels: channels,
            channel_schedule: vec![channels; depth],
            alpha: DEFAULT_ALPHA,
            multi_level: depth >= AGGREGATED_BLOCKS,
            head_hidden: channels * 2,
            num_tags,
            dropout_head: 0.0,
            weight_decay: 0.0,
            tags: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.depth > 12 {
            return fail(format!("depth must be in 1..=12, got {}", self.depth));
        }
        if self.input_len != input_len_for_depth(self.depth) {
            return fail(format!(
                "input_len must equal 3^(depth+1) = {} for depth {}, got {}",
                input_len_for_depth(self.depth),
                self.depth,
                self.input_len
            ));
        }
        if self.channel_schedule.len() != self.depth {
            return fail(format!(
                "channel_schedule length {} must equal depth {}",
                self.channel_schedule.len(),
                self.depth
            ));
        }
        if self.strided_channels == 0 || self.channel_schedule.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.multi_level && self.depth < AGGREGATED_BLOCKS {
            return fail(format!(
                "multi_level aggregates the last {AGGREGATED_BLOCKS} blocks but depth is {}",
                self.depth
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.head_hidden == 0 || self.num_tags == 0 {
            return fail("head_hidden and num_tags must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_head) {
            return fail(format!("dropout_head {} outside [0, 1)", self.dropout_head));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !self.tags.is_empty() && self.tags.len() != self.num_tags {
            return fail(format!(
                "{} tag names for num_tags = {}",
                self.tags.len(),
                self.num_tags
            ));
        }
        Ok(())
    }

    /// Width of the head input: the last block's channels, or the sum over
    /// the last three blocks with multi-level aggregation.
    pub fn head_input_dim(&self) -> usize {
        let s = &self.channel_schedule;
        if self.multi_level {
            s[s.len() - AGGREGATED_BLOCKS..].iter().sum()
        } else {
            *s.last().unwrap_or(&0)
        }
    }

    /// Closed-form trainable parameter count; see [`crate::blocks`] for the
    /// per-block terms.
    pub fn param_count(&self) -> usize {
        let mut n = blocks::conv_param_count(3, 1, self.strided_channels) + 2 * self.strided_channels;
        let mut cin = self.strided_channels;
        for &cout in &self.channel_schedule {
            n += blocks::block_param_count(self.block_kind, cin, cout, self.alpha);
            cin = cout;
        }
        n += self.head_input_dim() * self.head_hidden + self.head_hidden;
        n += self.head_hidden * self.num_tags + self.num_tags;
        n
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub input: StridedInput<T>,
    pub blocks: Vec<Block<T>>,
    pub fc1: DenseParams<T>,
    pub fc2: DenseParams<T>,
}

impl<T: Real> Network<T> {
    /// Network with zero weights, identity batch norm.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut cin = config.strided_channels;
        for &cout in &config.channel_schedule {
            blocks.push(Block::new(config.block_kind, cin, cout, config.alpha)?);
            cin = cout;
        }
        Ok(Network {
            input: StridedInput::new(config.strided_channels)?,
            blocks,
            fc1: DenseParams::new(config.head_input_dim(), config.head_hidden)?,
            fc2: DenseParams::new(config.head_hidden, config.num_tags)?,
            config,
        })
    }

    /// He-uniform weights, BN gamma 1 / beta 0, zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.input.init(&mut rng);
        for b in &mut net.blocks {
            b.init(&mut rng);
        }
        net.fc1.init_he_uniform(&mut rng);
        net.fc2.init_he_uniform(&mut rng);
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            input: self.input.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }

    /// Indices of blocks that carry an SE unit.
    pub fn se_block_indices(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| self.blocks[i].se.is_some())
            .collect()
    }

    /// Zeroes the last FC layer of every SE unit, pinning all gates at 0.5.
    pub fn zero_se_gates(&mut self) {
        for b in &mut self.blocks {
            if let Some(se) = b.se.as_mut() {
                se.zero_gate();
            }
        }
    }

    fn aggregated(&self) -> std::ops::Range<usize> {
        let d = self.blocks.len();
        if self.config.multi_level {
            d - AGGREGATED_BLOCKS..d
        } else {
            d - 1..d
        }
    }

    /// Eval-mode forward without recording.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut sess = Session::inference();
        self.forward(x, &mut sess)
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.fc1.visit(&join(prefix, "head.fc1"), f);
        self.fc2.visit(&join(prefix, "head.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.fc1.visit_mut(&join(prefix, "head.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "head.fc2"), f);
    }
}

impl<T: Real> Layer<T> for Network<T> {
    /// `(B, input_len, 1)` waveforms to `(B, 1, num_tags)` probabilities.
    fn forward(&mut self, x: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.time != self.config.input_len || xs.channels != 1 {
            return Err(Error::Dimension(format!(
                "network expects (B x {} x 1) input, got {xs}",
                self.config.input_len
            )));
        }
        let taps = self.aggregated();
        let mut h = self.input.forward(x, sess)?;
        let mut tapped = Vec::with_capacity(taps.len());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, sess)?;
            if taps.contains(&i) {
                tapped.push(h.clone());
            }
        }
        let pooled = tapped
            .iter()
            .map(|t| ops::global_max_pool(t, &mut sess.tape))
            .collect::<Result<Vec<_>>>()?;
        let z = Tensor::concat_channels(&pooled.iter().collect::<Vec<_>>())?;
        let z = ops::dense(&z, &self.fc1, &mut sess.tape)?;
        let z = ops::relu(&z, &mut sess.tape);
        let z = ops::dropout(&z, self.config.dropout_head, sess.mode, &mut sess.rng, &mut sess.tape)?;
        let z = ops::dense(&z, &self.fc2, &mut sess.tape)?;
        let out = ops::sigmoid(&z, &mut sess.tape);
        debug_assert_eq!(out.shape(), Shape::new(xs.batch, 1, self.config.num_tags));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, sess: &mut Session<T>) -> Result<Tensor<T>> {
        let g = ops::sigmoid_backward(grad, &mut sess.tape)?;
        let g = self.fc2.backward(&g, sess)?;
        let g = ops::dropout_backward(&g, &mut sess.tape)?;
        let g = ops::relu_backward(&g, &mut sess.tape)?;
        let g = self.fc1.backward(&g, sess)?;

        let taps = self.aggregated();
        let widths: Vec<usize> = taps.clone().map(|i| self.config.channel_schedule[i]).collect();
        let parts = g.split_channels(&widths)?;
        let mut tap_grads = Vec::with_capacity(parts.len());
        for part in parts.iter().rev() {
            tap_grads.push(ops::global_max_pool_backward(part, &mut sess.tape)?);
        }
        // tap_grads is now ordered last block first.
        let mut tap_grads = tap_grads.into_iter();
        let mut g = tap_grads.next().expect("at least one tap");
        for i in (0..self.blocks.len()).rev() {
            if i + 1 < self.blocks.len() && taps.contains(&i) {
                g.add_assign(&tap_grads.next().expect("tap per aggregated block"))?;
            }
            g = self.blocks[i].backward(&g, sess)?;
        }
        self.input.backward(&g, sess)
    }
}
