use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward state one primitive needs for its backward pass.
#[derive(Clone, Debug)]
pub enum Record<T> {
    Conv { input: Tensor<T> },
    MaxPool { argmax: Vec<usize>, input_shape: Shape },
    GlobalMaxPool { argmax: Vec<usize>, input_shape: Shape },
    GlobalAvgPool { input_shape: Shape },
    Dense { input: Tensor<T> },
    BatchNorm { normalized: Tensor<T>, inv_std: Vec<T>, mode: Mode },
    Relu { output: Tensor<T> },
    Sigmoid { output: Tensor<T> },
    Dropout { mask: Option<Vec<T>> },
    ChannelScale { input: Tensor<T>, gate: Tensor<T> },
}

impl<T> Record<T> {
    pub fn op_name(&self) -> &'static str {
        match self {
            Record::Conv { .. } => "conv1d",
            Record::MaxPool { .. } => "maxpool1d",
            Record::GlobalMaxPool { .. } => "global_max_pool",
            Record::GlobalAvgPool { .. } => "global_avg_pool",
            Record::Dense { .. } => "dense",
            Record::BatchNorm { .. } => "batchnorm1d",
            Record::Relu { .. } => "relu",
            Record::Sigmoid { .. } => "sigmoid",
            Record::Dropout { .. } => "dropout",
            Record::ChannelScale { .. } => "channel_scale",
        }
    }
}

/// Stack of forward records. Backward passes pop in reverse order, so each
/// record is consumed exactly once; popping from an empty tape or finding a
/// record of the wrong op is a state error.
#[derive(Clone, Debug)]
pub struct GradTape<T> {
    records: Vec<Record<T>>,
    enabled: bool,
}

impl<T> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            records: Vec::new(),
            enabled: true,
        }
    }

    /// A tape that records nothing, for inference.
    pub fn disabled() -> Self {
        GradTape {
            records: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Names of the recorded ops, oldest first.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.records.iter().map(Record::op_name).collect()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn push(&mut self, record: Record<T>) {
        if self.enabled {
            self.records.push(record);
        }
    }

    pub fn pop(&mut self, expected: &'static str) -> Result<Record<T>> {
        match self.records.pop() {
            Some(r) if r.op_name() == expected => Ok(r),
            Some(r) => Err(Error::State(format!(
                "tape mismatch: backward of {expected} found a {} record",
                r.op_name()
            ))),
            None => Err(Error::State(format!(
                "backward of {expected} called with no forward record (tape empty or already consumed)"
            ))),
        }
    }
}

/// Everything a forward pass needs besides the parameters: the tape, the
/// train/eval switch, the dropout RNG stream, and an optional sink for SE
/// gate activations.
pub struct Session<T> {
    pub tape: GradTape<T>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub gates: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Session<T> {
    pub fn new(mode: Mode, record: bool, seed: u64) -> Self {
        Session {
            tape: if record {
                GradTape::new()
            } else {
                GradTape::disabled()
            },
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gates: None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train, true, seed)
    }

    /// Eval mode, no recording.
    pub fn inference() -> Self {
        Self::new(Mode::Eval, false, 0)
    }

    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = rng;
        self
    }

    pub fn capturing_gates(mut self) -> Self {
        self.gates = Some(Vec::new());
        self
    }
}
