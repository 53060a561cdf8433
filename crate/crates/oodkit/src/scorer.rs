//! OoD scoring functions.
//!
//! Every scorer maps an input batch to one scalar per sample (higher = more
//! in-distribution) through an eval-mode forward on the tape, so scores stay
//! differentiable with respect to the inputs as the input preprocessing step
//! requires.
//!
//! Families: max-softmax baseline, temperature-scaled ODIN (fixed T, no OoD
//! tuning), layer-wise Mahalanobis with uniform layer weights, and the DeConf
//! h/g branches.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::model::Model;
use crate::numgrad::{transpose_raw, NumError, Tape, Tensor};

/// ODIN temperature; the gain saturates for large T, so it is fixed rather
/// than tuned.
pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;

/// Relative ridge applied to each layer covariance before factorization.
pub const MAHA_RIDGE_SCALE: f64 = 1e-6;

/// Absolute ridge floor so zero-scatter features still factor.
pub const MAHA_RIDGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreError {
    Num(NumError),
    InvalidTemperature(f64),
    /// The g branch was requested on a Plain head.
    NeedsDivisor,
    /// Mahalanobis scoring was requested without fitted parameters.
    NotFitted,
    BadLabel { label: usize, classes: usize },
    TooFewSamples { class: usize, got: usize },
    SingularCovariance { layer: usize },
    /// Fitted layer count does not match the model's feature taps.
    LayerMismatch { fitted: usize, model: usize },
}

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreError::Num(e) => write!(f, "{e}"),
            ScoreError::InvalidTemperature(t) => {
                write!(f, "temperature must be positive, got {t}")
            }
            ScoreError::NeedsDivisor => {
                write!(f, "g-branch scoring requires a head with the divisor enabled")
            }
            ScoreError::NotFitted => {
                write!(f, "Mahalanobis scoring requires fitted parameters")
            }
            ScoreError::BadLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            ScoreError::TooFewSamples { class, got } => {
                write!(f, "class {class} has {got} samples; Mahalanobis needs at least 2")
            }
            ScoreError::SingularCovariance { layer } => {
                write!(f, "layer {layer} covariance is singular after regularization")
            }
            ScoreError::LayerMismatch { fitted, model } => {
                write!(f, "Mahalanobis params fitted on {fitted} layers, model taps {model}")
            }
        }
    }
}

impl std::error::Error for ScoreError {}

impl From<NumError> for ScoreError {
    fn from(e: NumError) -> ScoreError {
        ScoreError::Num(e)
    }
}

/// A differentiable per-sample scoring function.
pub trait Score {
    fn name(&self) -> String;

    /// Scores a `[B,k]` batch as `[B,1]`. If `x` is watched on `tape`, the
    /// result is differentiable w.r.t. `x`.
    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError>;
}

/// Convenience: plain score values with a throwaway tape.
pub fn score_values(score: &dyn Score, x: &Tensor) -> Result<Vec<f64>, ScoreError> {
    let mut tape = Tape::new();
    let s = score.score_batch(&mut tape, x)?;
    Ok(s.data().to_vec())
}

/// Scoring family selector, as exposed on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreKind {
    Baseline,
    Odin,
    Mahalanobis,
    DeconfH,
    DeconfG,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Baseline => "baseline",
            ScoreKind::Odin => "odin",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::DeconfH => "deconf-h",
            ScoreKind::DeconfG => "deconf-g",
        }
    }

    pub fn parse(s: &str) -> Option<ScoreKind> {
        Some(match s.to_ascii_lowercase().as_str() {
            "baseline" => ScoreKind::Baseline,
            "odin" => ScoreKind::Odin,
            "mahalanobis" | "maha" => ScoreKind::Mahalanobis,
            "deconf-h" | "deconfh" => ScoreKind::DeconfH,
            "deconf-g" | "deconfg" => ScoreKind::DeconfG,
            _ => return None,
        })
    }

    pub fn all() -> [ScoreKind; 5] {
        [
            ScoreKind::Baseline,
            ScoreKind::Odin,
            ScoreKind::Mahalanobis,
            ScoreKind::DeconfH,
            ScoreKind::DeconfG,
        ]
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Builds a scorer over a frozen model. Mahalanobis requires fitted params.
pub fn build_scorer<'m>(
    kind: ScoreKind,
    model: &'m Model,
    temperature: f64,
    maha: Option<&MahalanobisParams>,
) -> Result<Box<dyn Score + 'm>, ScoreError> {
    Ok(match kind {
        ScoreKind::Baseline => Box::new(BaselineScore::new(model)),
        ScoreKind::Odin => Box::new(OdinScore::new(model, temperature)?),
        ScoreKind::Mahalanobis => {
            let params = maha.ok_or(ScoreError::NotFitted)?;
            Box::new(MahalanobisScore::new(model, params.clone())?)
        }
        ScoreKind::DeconfH => Box::new(DeconfScore::h_branch(model)),
        ScoreKind::DeconfG => Box::new(DeconfScore::g_branch(model)?),
    })
}

// ── baseline ─────────────────────────────────────────────────────────────

/// Max softmax probability of the model's logits, in (1/C, 1].
#[derive(Debug)]
pub struct BaselineScore<'m> {
    model: &'m Model,
}

impl<'m> BaselineScore<'m> {
    pub fn new(model: &'m Model) -> Self {
        BaselineScore { model }
    }
}

impl Score for BaselineScore<'_> {
    fn name(&self) -> String {
        ScoreKind::Baseline.as_str().into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let out = self.model.bind(tape, false).forward_eval(tape, x)?;
        let probs = tape.softmax(&out.head.logits)?;
        Ok(tape.max_axis1(&probs)?)
    }
}

// ── ODIN ─────────────────────────────────────────────────────────────────

/// Max softmax probability of temperature-scaled logits. T=1 reduces exactly
/// to the baseline.
#[derive(Debug)]
pub struct OdinScore<'m> {
    model: &'m Model,
    temperature: f64,
}

impl<'m> OdinScore<'m> {
    pub fn new(model: &'m Model, temperature: f64) -> Result<Self, ScoreError> {
        if !(temperature > 0.0) {
            return Err(ScoreError::InvalidTemperature(temperature));
        }
        Ok(OdinScore { model, temperature })
    }
}

impl Score for OdinScore<'_> {
    fn name(&self) -> String {
        ScoreKind::Odin.as_str().into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let out = self.model.bind(tape, false).forward_eval(tape, x)?;
        let scaled = tape.scale(&out.head.logits, 1.0 / self.temperature)?;
        let probs = tape.softmax(&scaled)?;
        Ok(tape.max_axis1(&probs)?)
    }
}

// ── DeConf h/g ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeconfBranch {
    H,
    G,
}

/// Scores from the decomposed head: max class evidence h, or the divisor g.
#[derive(Debug)]
pub struct DeconfScore<'m> {
    model: &'m Model,
    branch: DeconfBranch,
}

impl<'m> DeconfScore<'m> {
    pub fn h_branch(model: &'m Model) -> Self {
        DeconfScore { model, branch: DeconfBranch::H }
    }

    pub fn g_branch(model: &'m Model) -> Result<Self, ScoreError> {
        if !model.head.spec.g_enabled {
            return Err(ScoreError::NeedsDivisor);
        }
        Ok(DeconfScore { model, branch: DeconfBranch::G })
    }
}

impl Score for DeconfScore<'_> {
    fn name(&self) -> String {
        match self.branch {
            DeconfBranch::H => ScoreKind::DeconfH.as_str().into(),
            DeconfBranch::G => ScoreKind::DeconfG.as_str().into(),
        }
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let out = self.model.bind(tape, false).forward_eval(tape, x)?;
        match self.branch {
            DeconfBranch::H => Ok(tape.max_axis1(&out.head.h)?),
            DeconfBranch::G => out.head.g.ok_or(ScoreError::NeedsDivisor),
        }
    }
}

// ── Mahalanobis ──────────────────────────────────────────────────────────

/// Per-layer fit: class means and the whitening factor K with K^T K equal to
/// the inverse of the ridge-regularized tied covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MahaLayer {
    pub dim: usize,
    /// [C][d] class means of this layer's features.
    pub class_means: Vec<Vec<f64>>,
    /// Pooled covariance before regularization, row-major [d*d].
    pub pooled_cov: Vec<f64>,
    /// Ridge added to the diagonal.
    pub ridge: f64,
    /// K = L^{-1} (lower triangular, row-major) for Sigma_reg = L L^T.
    pub whitener: Vec<f64>,
}

/// Fitted Mahalanobis parameters across all feature taps; layer weights are
/// uniform (the OoD-free variant), so the total is a plain sum.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisParams {
    pub layers: Vec<MahaLayer>,
}

/// Fits class means and tied covariances on eval-mode features of the
/// training split. Covariance is pooled over classes (each sample centered by
/// its own class mean, normalized by N) and ridge-regularized before the
/// Cholesky factorization.
pub fn fit_mahalanobis(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<MahalanobisParams, ScoreError> {
    let n = inputs.rows();
    let classes = model.num_classes();
    if labels.len() != n || n == 0 {
        return Err(ScoreError::TooFewSamples { class: 0, got: 0 });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ScoreError::BadLabel { label: bad, classes });
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some((class, &got)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(ScoreError::TooFewSamples { class, got });
    }

    let mut tape = Tape::new();
    let out = model.bind(&mut tape, false).forward_eval(&mut tape, inputs)?;

    let mut layers = Vec::with_capacity(out.features.per_layer.len());
    for (layer_idx, feats) in out.features.per_layer.iter().enumerate() {
        let d = feats.cols();
        let mut means = vec![vec![0.0; d]; classes];
        for (r, &l) in labels.iter().enumerate() {
            for j in 0..d {
                means[l][j] += feats.get(r, j);
            }
        }
        for (class, m) in means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= counts[class] as f64;
            }
        }

        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for (r, &l) in labels.iter().enumerate() {
            for j in 0..d {
                centered[j] = feats.get(r, j) - means[l][j];
            }
            for i in 0..d {
                for j in 0..=i {
                    cov[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] /= n as f64;
                cov[j * d + i] = cov[i * d + j];
            }
        }

        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let ridge = (MAHA_RIDGE_SCALE * trace / d as f64).max(MAHA_RIDGE_FLOOR);
        let mut reg = cov.clone();
        for i in 0..d {
            reg[i * d + i] += ridge;
        }
        let chol = cholesky_lower(&reg, d)
            .ok_or(ScoreError::SingularCovariance { layer: layer_idx })?;
        let whitener = lower_triangular_inverse(&chol, d);

        layers.push(MahaLayer { dim: d, class_means: means, pooled_cov: cov, ridge, whitener });
    }
    Ok(MahalanobisParams { layers })
}

/// Sum over layers of the max-over-classes negative squared Mahalanobis
/// distance; every per-layer term is <= 0.
#[derive(Debug)]
pub struct MahalanobisScore<'m> {
    model: &'m Model,
    params: MahalanobisParams,
}

impl<'m> MahalanobisScore<'m> {
    pub fn new(model: &'m Model, params: MahalanobisParams) -> Result<Self, ScoreError> {
        let taps = model.backbone.spec.hidden_dims.len().max(1);
        if params.layers.len() != taps {
            return Err(ScoreError::LayerMismatch { fitted: params.layers.len(), model: taps });
        }
        Ok(MahalanobisScore { model, params })
    }

    pub fn params(&self) -> &MahalanobisParams {
        &self.params
    }
}

impl Score for MahalanobisScore<'_> {
    fn name(&self) -> String {
        ScoreKind::Mahalanobis.as_str().into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let out = self.model.bind(tape, false).forward_eval(tape, x)?;
        if out.features.per_layer.len() != self.params.layers.len() {
            return Err(ScoreError::LayerMismatch {
                fitted: self.params.layers.len(),
                model: out.features.per_layer.len(),
            });
        }
        let mut total: Option<Tensor> = None;
        for (layer, feats) in self.params.layers.iter().zip(&out.features.per_layer) {
            let d = layer.dim;
            let kt = Tensor::matrix(d, d, transpose_raw(&layer.whitener, d, d))?;
            let mut class_scores = Vec::with_capacity(layer.class_means.len());
            for mean in &layer.class_means {
                let mu = Tensor::vector(mean.clone())?;
                let diff = tape.sub_row(feats, &mu)?;
                let white = tape.matmul(&diff, &kt)?;
                let sq = tape.mul(&white, &white)?;
                let dist = tape.sum_axis1(&sq)?;
                class_scores.push(tape.scale(&dist, -1.0)?);
            }
            let refs: Vec<&Tensor> = class_scores.iter().collect();
            let all = tape.concat_cols(&refs)?;
            let layer_score = tape.max_axis1(&all)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &layer_score)?,
                None => layer_score,
            });
        }
        Ok(total.expect("at least one feature tap"))
    }
}

/// Per-layer scores (max over classes), detached; used for range checks and
/// the brute-force oracle comparison.
pub fn mahalanobis_layer_scores(
    score: &MahalanobisScore<'_>,
    x: &Tensor,
) -> Result<Vec<Vec<f64>>, ScoreError> {
    let mut tape = Tape::new();
    let out = score.model.bind(&mut tape, false).forward_eval(&mut tape, x)?;
    let mut per_layer = Vec::new();
    for (layer, feats) in score.params.layers.iter().zip(&out.features.per_layer) {
        let d = layer.dim;
        let kt = Tensor::matrix(d, d, transpose_raw(&layer.whitener, d, d))?;
        let mut best = vec![f64::NEG_INFINITY; x.rows()];
        for mean in &layer.class_means {
            let mu = Tensor::vector(mean.clone())?;
            let diff = tape.sub_row(feats, &mu)?;
            let white = tape.matmul(&diff, &kt)?;
            let sq = tape.mul(&white, &white)?;
            let dist = tape.sum_axis1(&sq)?;
            for (b, v) in best.iter_mut().zip(dist.data()) {
                *b = b.max(-v);
            }
        }
        per_layer.push(best);
    }
    Ok(per_layer)
}

fn cholesky_lower(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn lower_triangular_inverse(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        for i in col..d {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * d + k] * inv[k * d + col];
            }
            inv[i * d + col] = s / l[i * d + i];
        }
    }
    inv
}
