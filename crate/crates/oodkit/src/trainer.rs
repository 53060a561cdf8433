//! Cross-entropy training: He initialization, SGD with momentum, step
//! learning-rate schedule, and weight-decay exclusion for the head's class
//! weights (they act as class centroids).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::model::{Model, ParamTag};
use crate::numgrad::{NumError, Tape, Tensor};
use crate::seeds;

/// Training hyperparameters. The reference configuration follows the usual
/// ResNet-style recipe: batch 128, SGD momentum 0.9, lr 0.1 dropped by 10x at
/// 50% and 75% of the epochs; desk-scale runs shrink epochs via config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of total epochs at which lr is multiplied by 0.1.
    pub lr_drop_points: Vec<f64>,
    /// Whether the divisor's w_g/b_g are weight-decayed. They are not
    /// centroids, so the default decays them.
    pub decay_divisor: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn reference() -> TrainConfig {
        TrainConfig {
            batch_size: 128,
            epochs: 200,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_points: vec![0.5, 0.75],
            decay_divisor: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(TrainError::InvalidConfig("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.lr_drop_points.iter().any(|f| !(0.0 < *f && *f < 1.0)) {
            return Err(TrainError::InvalidConfig("lr drop points must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    EmptyDataset,
    BadLabel { label: usize, classes: usize },
    /// Training produced a non-finite value; carries the failing op.
    Diverged { epoch: usize, detail: String },
    Num(NumError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid train config: {msg}"),
            TrainError::EmptyDataset => write!(f, "training set is empty"),
            TrainError::BadLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TrainError::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
            TrainError::Num(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> TrainError {
        TrainError::Num(e)
    }
}

fn diverged(epoch: usize) -> impl Fn(NumError) -> TrainError {
    move |e| match e {
        NumError::NonFinite { op } => {
            TrainError::Diverged { epoch, detail: format!("non-finite result in {op}") }
        }
        other => TrainError::Num(other),
    }
}

/// Per-epoch training curves; all vectors have length `epochs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
}

impl TrainHistory {
    /// CSV rows `epoch,loss,train_acc,val_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,val_acc\n");
        for e in 0..self.train_loss.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e, self.train_loss[e], self.train_acc[e], self.val_acc[e]
            ));
        }
        out
    }
}

/// He initialization: i.i.d. N(0, 2/fan_in).
pub fn he_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "he_init fan_in must be >= 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("normal draws are finite")
}

/// Mean negative log softmax-probability of the true class, in log space.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TrainError> {
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::BadLabel { label: bad, classes });
    }
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.gather_class(&lsm, labels)?;
    let mean = tape.mean(&picked)?;
    Ok(tape.scale(&mean, -1.0)?)
}

/// Learning rate at `epoch`: lr0 times 0.1 for every drop point passed.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr0;
    for &frac in &cfg.lr_drop_points {
        if (epoch as f64) >= frac * cfg.epochs as f64 {
            lr *= 0.1;
        }
    }
    lr
}

/// Whether a parameter group receives weight decay.
pub fn decay_enabled(tag: ParamTag, cfg: &TrainConfig) -> bool {
    match tag {
        ParamTag::Backbone => true,
        ParamTag::HeadClass => false,
        ParamTag::Divisor => cfg.decay_divisor,
    }
}

/// Momentum buffers, aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &Model) -> SgdState {
        SgdState {
            velocity: model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// One SGD-momentum step: v <- m*v + (grad + wd*p); p <- p - lr*v.
/// Weight decay skips head class weights (and optionally the divisor).
pub fn sgd_step(
    model: &mut Model,
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &TrainConfig,
    epoch: usize,
) {
    let lr = lr_at_epoch(cfg, epoch);
    let mut params = model.params_mut();
    assert_eq!(params.len(), grads.len(), "gradients misaligned with parameters");
    assert_eq!(params.len(), state.velocity.len(), "sgd state misaligned with parameters");
    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let wd = if decay_enabled(param.tag, cfg) { cfg.weight_decay } else { 0.0 };
        let p = param.tensor.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            let gi = g[i] + wd * p[i];
            vel[i] = cfg.momentum * vel[i] + gi;
            p[i] -= lr * vel[i];
        }
    }
}

/// Classification accuracy under eval-mode forwards, batched.
pub fn accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64, TrainError> {
    let n = x.rows();
    if n == 0 || y.len() != n {
        return Err(TrainError::EmptyDataset);
    }
    let k = x.cols();
    let mut correct = 0usize;
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<f64> = x.data()[start * k..end * k].to_vec();
        let xb = Tensor::matrix(end - start, k, rows)?;
        let mut tape = Tape::new();
        let out = model.bind(&mut tape, false).forward_eval(&mut tape, &xb)?;
        for r in 0..(end - start) {
            if argmax(&out.head.logits.row(r)) == y[start + r] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Each epoch shuffles with an RNG derived from (seed, epoch); dropout draws
/// from its own per-epoch stream. Two calls with identical inputs produce
/// bit-identical models.
pub fn train(
    model: &mut Model,
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let n = train_x.rows();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.num_classes();
    if train_y.len() != n {
        return Err(TrainError::InvalidConfig(format!(
            "{} labels for {n} training rows",
            train_y.len()
        )));
    }
    if let Some(&bad) = train_y.iter().chain(val_y).find(|&&l| l >= classes) {
        return Err(TrainError::BadLabel { label: bad, classes });
    }
    let k = train_x.cols();

    let mut state = SgdState::new(model);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "dropout", epoch as u64));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(batch.len() * k);
            let mut yb = Vec::with_capacity(batch.len());
            for &i in batch {
                xb.extend_from_slice(&train_x.data()[i * k..(i + 1) * k]);
                yb.push(train_y[i]);
            }
            let xb = Tensor::matrix(batch.len(), k, xb)?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let out =
                bound.forward_train(&mut tape, &xb, &mut dropout_rng).map_err(diverged(epoch))?;
            let loss = cross_entropy(&mut tape, &out.head.logits, &yb).map_err(|e| match e {
                TrainError::Num(num) => diverged(epoch)(num),
                other => other,
            })?;
            let grads = tape.grad(&loss, &bound.watched_params()).map_err(diverged(epoch))?;

            sgd_step(model, &grads, &mut state, cfg, epoch);
            model.apply_bn_updates(&out.backbone_bn, &out.head.g_bn_stats);

            loss_sum += loss.item() * batch.len() as f64;
            for (r, &yi) in yb.iter().enumerate() {
                if argmax(&out.head.logits.row(r)) == yi {
                    correct += 1;
                }
            }
        }

        history.train_loss.push(loss_sum / n as f64);
        history.train_acc.push(correct as f64 / n as f64);
        history.val_acc.push(if val_y.is_empty() { 0.0 } else { accuracy(model, val_x, val_y)? });
    }
    Ok(history)
}
