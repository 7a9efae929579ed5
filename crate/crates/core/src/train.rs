//! Multi-label loss, SGD with Nesterov momentum, plateau learning-rate decay
//! and the epoch loop.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitView;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::Network;
use crate::tensor::{Layer, ParamKind, Parameterized, Real, Session, Tensor};

/// Predictions are clamped to `[LOSS_CLAMP, 1 - LOSS_CLAMP]` before the log.
pub const LOSS_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over every (item, tag) entry and its gradient
/// with respect to `pred`. Where a prediction is clamped the gradient is
/// taken at the clamped value.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "bce_loss: predictions {} vs targets {}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.f64().clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
        let y = y.f64();
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(T::of((-y / p + (1.0 - y) / (1.0 - p)) / n));
    }
    Ok((loss / n, Tensor::new(pred.shape(), grad)?))
}

/// One Nesterov step on a flat slice, in look-ahead form:
///
/// ```text
/// g' = g + wd·w
/// v  ← μ·v − lr·g'
/// w  ← w + μ·v − lr·g'
/// ```
pub fn nesterov_update<T: Real>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + wd * *w;
        *v = mu * *v - lr * g;
        *w = *w + mu * *v - lr * g;
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One velocity buffer per trainable parameter, in visiting order.
    pub velocity: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
            step_count: 0,
        })
    }
}

/// Applies one update to every trainable parameter of `model`. Weight decay
/// touches conv and dense weights only. Nothing is updated if any gradient
/// is non-finite.
pub fn sgd_nesterov_step<T: Real, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    state: &mut OptimState<T>,
) -> Result<()> {
    let mut bad = None;
    model.visit("", &mut |name, p| {
        if bad.is_none() && p.is_trainable() && p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter {name}; training aborted"
        )));
    }
    let fresh = state.velocity.is_empty();
    let mut idx = 0;
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    let velocity = &mut state.velocity;
    let mut mismatch = false;
    model.visit_mut("", &mut |_, p| {
        if !p.is_trainable() {
            return;
        }
        if fresh {
            velocity.push(vec![T::zero(); p.len()]);
        }
        match velocity.get_mut(idx) {
            Some(v) if v.len() == p.len() => {
                let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
                nesterov_update(&mut p.value, &p.grad, v, lr, mu, decay);
            }
            _ => mismatch = true,
        }
        idx += 1;
    });
    if mismatch || idx != velocity.len() {
        return Err(Error::State("optimizer velocity does not match the model".into()));
    }
    state.step_count += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 5.0,
            patience: 3,
            min_lr: 1e-6,
            min_delta: 0.0,
        }
    }
}

/// Divides the learning rate by `factor` after `patience` consecutive
/// epochs without a validation-loss improvement larger than `min_delta`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub config: PlateauConfig,
    best: Option<f64>,
    since_improve: usize,
    exhausted: bool,
}

impl PlateauSchedule {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 1.0) || config.patience == 0 || !(config.min_lr > 0.0) {
            return Err(Error::Config(format!("invalid plateau schedule {config:?}")));
        }
        Ok(PlateauSchedule {
            config,
            best: None,
            since_improve: 0,
            exhausted: false,
        })
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// True once a decay was due while the rate already sat at `min_lr`.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    /// Feeds one epoch's validation loss; returns whether `lr` was decayed.
    pub fn step<T>(&mut self, val_loss: f64, state: &mut OptimState<T>) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => b - val_loss > self.config.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.since_improve = 0;
            return false;
        }
        self.since_improve += 1;
        if self.since_improve < self.config.patience {
            return false;
        }
        self.since_improve = 0;
        if state.lr <= self.config.min_lr {
            self.exhausted = true;
            return false;
        }
        state.lr = (state.lr / self.config.factor).max(self.config.min_lr);
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    /// Stop after this many epochs without validation improvement.
    pub early_stop_patience: Option<usize>,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 23,
            max_epochs: 50,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
            early_stop_patience: None,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One pass over `data` in shuffled mini-batches. Returns the mean loss per
/// segment.
pub fn train_epoch(
    net: &mut Network<f32>,
    data: &SplitView<'_>,
    optim: &mut OptimState<f32>,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("training set has no segments".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        net.zero_grad();
        let mut sess = Session::train(rng.gen());
        let probs = net.forward(&x, &mut sess)?;
        let (loss, grad) = bce_loss(&probs, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        net.backward(&grad, &mut sess)?;
        sgd_nesterov_step(net, optim)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Mean eval-mode loss per segment.
pub fn eval_loss(net: &mut Network<f32>, data: &SplitView<'_>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set has no segments".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let probs = net.predict(&x)?;
        total += bce_loss(&probs, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// NaN when no validation tag has both classes.
    pub val_auc: f64,
    pub decayed: bool,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={:.6} val_loss={:.6} val_auc={:.6} decayed={}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_auc, self.decayed
        )
    }
}

pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot of the network after its best validation epoch.
    pub best: Network<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Runs the epoch loop: train, validate, drive the plateau schedule, keep
/// the best-validation network. Stops at `max_epochs`, at the learning-rate
/// floor, or on early stopping.
pub fn fit(
    net: &mut Network<f32>,
    train: &SplitView<'_>,
    val: &SplitView<'_>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut optim = OptimState::new(cfg.lr, cfg.momentum, net.config.weight_decay)?;
    let mut sched = PlateauSchedule::new(cfg.plateau.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(Network<f32>, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let lr = optim.lr;
        let train_loss = train_epoch(net, train, &mut optim, &mut rng, cfg.batch_size)?;
        let val_loss = eval_loss(net, val, cfg.batch_size)?;
        let val_auc = match eval::evaluate(net, val) {
            Ok(r) => r.macro_auc,
            Err(Error::Data(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let decayed = sched.step(val_loss, &mut optim);
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_auc,
            decayed,
        };
        info!("{}", rec.log_line());
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", rec.log_line()).map_err(|e| Error::io("<training log>", e))?;
        }
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((net.clone(), epoch, val_loss));
            stale = 0;
        } else {
            stale += 1;
        }
        if sched.exhausted() {
            info!("learning rate floor reached at epoch {epoch}");
            break;
        }
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            info!("early stop at epoch {epoch}");
            break;
        }
    }
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch");
    Ok(FitOutcome {
        history,
        best,
        best_epoch,
        best_val_loss,
    })
}
