//! MLP backbone with batch normalization, head-input dropout, and feature
//! taps: per-layer post-activations plus the penultimate features that feed
//! the classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::numgrad::{NumError, Tape, Tensor};
use crate::trainer::he_init;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode. Train uses batch statistics and active dropout; eval
/// depends only on weights and running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A config or spec field failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct InvalidSpec(pub String);

impl fmt::Display for InvalidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid spec: {}", self.0)
    }
}

impl std::error::Error for InvalidSpec {}

/// Backbone architecture: input width, hidden widths, one batch-norm flag
/// applied to every hidden layer, and the dropout rate applied to the head
/// input during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub use_batchnorm: bool,
    pub head_dropout: f64,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        if self.input_dim < 1 {
            return Err(InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.hidden_dims.iter().any(|&d| d < 1) {
            return Err(InvalidSpec("hidden dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(InvalidSpec(format!(
                "head_dropout must be in [0,1), got {}",
                self.head_dropout
            )));
        }
        Ok(())
    }

    /// Width of the penultimate features: the last hidden layer, or the input
    /// itself for a zero-depth backbone.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// Per-feature batch normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::filled(vec![dim], 1.0).expect("finite"),
            beta: Tensor::zeros(vec![dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Folds batch statistics into the running estimates:
    /// running <- (1-m)*running + m*batch.
    pub fn apply_update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch mean/variance observed during one train-mode forward. Variance is
/// the biased (1/B) estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One hidden layer: linear weights [out,in], bias [out], optional BN.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

/// The backbone: owns specs and learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub layers: Vec<Layer>,
}

impl Backbone {
    /// He-initialized backbone: weights ~ N(0, 2/fan_in), zero biases,
    /// identity-initialized batch norm.
    pub fn init<R: Rng>(spec: BackboneSpec, rng: &mut R) -> Result<Backbone, InvalidSpec> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden_dims.len());
        let mut fan_in = spec.input_dim;
        for &out in &spec.hidden_dims {
            let weight = he_init(&[out, fan_in], fan_in, rng);
            let bias = Tensor::zeros(vec![out]);
            let bn = spec.use_batchnorm.then(|| BatchNorm::new(out));
            layers.push(Layer { weight, bias, bn });
            fan_in = out;
        }
        Ok(Backbone { spec, layers })
    }

    /// Clones parameters onto a tape; watched (differentiable) iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: bind_tensor(tape, &l.weight, trainable),
                bias: bind_tensor(tape, &l.bias, trainable),
                bn: l.bn.as_ref().map(|bn| BoundBn {
                    gamma: bind_tensor(tape, &bn.gamma, trainable),
                    beta: bind_tensor(tape, &bn.beta, trainable),
                    running_mean: bn.running_mean.clone(),
                    running_var: bn.running_var.clone(),
                    eps: bn.eps,
                }),
            })
            .collect();
        BoundBackbone { input_dim: self.spec.input_dim, layers }
    }

    /// Folds train-mode batch statistics into the running estimates. Entries
    /// align with layers; `None` marks layers without BN (or eval passes).
    pub fn apply_bn_updates(&mut self, stats: &[Option<BatchStats>]) {
        for (layer, stat) in self.layers.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (layer.bn.as_mut(), stat.as_ref()) {
                bn.apply_update(s);
            }
        }
    }
}

pub(crate) fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Tensor {
    if trainable {
        tape.watch(t)
    } else {
        t.detached()
    }
}

/// A backbone bound to a tape for one forward pass.
#[derive(Debug)]
pub struct BoundBackbone {
    pub input_dim: usize,
    pub layers: Vec<BoundLayer>,
}

#[derive(Debug)]
pub struct BoundLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BoundBn>,
}

#[derive(Debug)]
pub struct BoundBn {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// Feature taps from one forward pass: post-activation features of every
/// hidden layer, plus the penultimate features (identical to the last entry;
/// the input itself for a zero-depth backbone).
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub per_layer: Vec<Tensor>,
    pub penultimate: Tensor,
}

impl BoundBackbone {
    /// Runs the backbone on a `[B, input_dim]` batch.
    ///
    /// Train mode normalizes with batch statistics and reports them for the
    /// running-stat update; eval mode uses running statistics only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(FeatureBundle, Vec<Option<BatchStats>>), NumError> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim {
            return Err(NumError::Shape {
                op: "backbone_forward",
                detail: format!("expected [B,{}], got {:?}", self.input_dim, x.shape()),
            });
        }
        let mut h = x.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wt = tape.transpose(&layer.weight)?;
            let z = tape.matmul(&h, &wt)?;
            let z = tape.add_row(&z, &layer.bias)?;
            let (z, stats) = match &layer.bn {
                Some(bn) => batchnorm_forward(
                    tape,
                    &z,
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    bn.eps,
                    mode,
                )?,
                None => (z, None),
            };
            h = tape.relu(&z)?;
            per_layer.push(h.clone());
            bn_stats.push(stats);
        }
        if per_layer.is_empty() {
            per_layer.push(h.clone());
        }
        let penultimate = per_layer.last().expect("at least one feature tap").clone();
        Ok((FeatureBundle { per_layer, penultimate }, bn_stats))
    }
}

/// Batch normalization over `[B,F]`, differentiable through the batch
/// statistics in train mode.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    tape: &mut Tape,
    z: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    mode: Mode,
) -> Result<(Tensor, Option<BatchStats>), NumError> {
    match mode {
        Mode::Train => {
            let mu = tape.mean_axis0(z)?;
            let centered = tape.sub_row(z, &mu)?;
            let sq = tape.mul(&centered, &centered)?;
            let var = tape.mean_axis0(&sq)?;
            let std = {
                let v = tape.add_scalar(&var, eps)?;
                tape.sqrt(&v)?
            };
            let normed = tape.div_row(&centered, &std)?;
            let scaled = tape.mul_row(&normed, gamma)?;
            let out = tape.add_row(&scaled, beta)?;
            let stats = BatchStats { mean: mu.data().to_vec(), var: var.data().to_vec() };
            Ok((out, Some(stats)))
        }
        Mode::Eval => {
            let rm = Tensor::vector(running_mean.to_vec())?;
            let std = Tensor::vector(running_var.iter().map(|v| (v + eps).sqrt()).collect())?;
            let centered = tape.sub_row(z, &rm)?;
            let normed = tape.div_row(&centered, &std)?;
            let scaled = tape.mul_row(&normed, gamma)?;
            let out = tape.add_row(&scaled, beta)?;
            Ok((out, None))
        }
    }
}

/// Inverted dropout on head inputs: train mode zeroes each unit with
/// probability `p` and scales survivors by 1/(1-p); eval mode is the identity.
pub fn dropout<R: Rng>(
    tape: &mut Tape,
    features: &Tensor,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor, NumError> {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1), got {p}");
    if mode == Mode::Eval || p == 0.0 {
        return Ok(features.clone());
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..features.numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
        .collect();
    let mask = Tensor::new(features.shape().to_vec(), mask)?;
    tape.mul(features, &mask)
}
