//! Input preprocessing and the OoD-free epsilon search.
//!
//! Preprocessing nudges each input coordinate by +/- epsilon along the sign
//! of the score gradient: x_hat = x + eps * sign(grad_x S(x)). The magnitude
//! is picked by maximizing the mean perturbed score on the in-distribution
//! validation inputs over a fixed 6-point grid (no OoD data and no labels),
//! then halved to mitigate grid overshoot.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::numgrad::{NumError, Tape, Tensor};
use crate::scorer::{score_values, Score, ScoreError};
use crate::shiftbench::LabeledSet;

/// The fixed search grid.
pub const EPSILON_GRID: [f64; 6] = [0.0025, 0.005, 0.01, 0.02, 0.04, 0.08];

#[derive(Debug, Clone, PartialEq)]
pub enum PerturbError {
    NegativeEpsilon(f64),
    EmptyValidationSet,
    NonFiniteGradient,
    Score(ScoreError),
}

impl fmt::Display for PerturbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbError::NegativeEpsilon(e) => write!(f, "epsilon must be >= 0, got {e}"),
            PerturbError::EmptyValidationSet => write!(f, "validation set is empty"),
            PerturbError::NonFiniteGradient => write!(f, "score gradient is not finite"),
            PerturbError::Score(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PerturbError {}

impl From<ScoreError> for PerturbError {
    fn from(e: ScoreError) -> PerturbError {
        PerturbError::Score(e)
    }
}

impl From<NumError> for PerturbError {
    fn from(e: NumError) -> PerturbError {
        PerturbError::Score(ScoreError::Num(e))
    }
}

/// x_hat = x + eps * sign(grad_x S(x)), elementwise; sign(0) = 0.
///
/// The gradient is taken of the summed batch score; rows are independent in
/// eval mode, so this equals per-sample gradients. eps = 0 returns `x`
/// unchanged, bit for bit.
pub fn perturb(score: &dyn Score, x: &Tensor, epsilon: f64) -> Result<Tensor, PerturbError> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(PerturbError::NegativeEpsilon(epsilon));
    }
    if epsilon == 0.0 {
        return Ok(x.detached());
    }
    let mut tape = Tape::new();
    let xw = tape.watch(x);
    let s = score.score_batch(&mut tape, &xw)?;
    let total = tape.sum(&s)?;
    let grads = tape.grad(&total, &[&xw]).map_err(|e| match e {
        NumError::NonFinite { .. } => PerturbError::NonFiniteGradient,
        other => PerturbError::from(other),
    })?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grads[0].data())
        .map(|(&xi, &gi)| xi + epsilon * sign(gi))
        .collect();
    Ok(Tensor::with_node(x.shape().to_vec(), data, None))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of the epsilon search: the full mean-score curve over the grid,
/// the argmax, and the halved final magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearchResult {
    pub grid: Vec<f64>,
    pub mean_scores: Vec<f64>,
    pub argmax_epsilon: f64,
    pub epsilon_star: f64,
    pub score_fn: String,
}

impl EpsilonSearchResult {
    /// CSV rows `epsilon,mean_score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,mean_score\n");
        for (e, s) in self.grid.iter().zip(&self.mean_scores) {
            out.push_str(&format!("{e},{s}\n"));
        }
        out
    }
}

/// Picks epsilon* on in-distribution validation inputs only.
///
/// For each grid epsilon the validation batch is perturbed and the mean score
/// recorded; the argmax (ties to the smallest epsilon) is halved. Labels in
/// `val` are ignored by construction.
pub fn select_epsilon(
    score: &dyn Score,
    val: &LabeledSet,
) -> Result<EpsilonSearchResult, PerturbError> {
    let inputs = &val.inputs;
    if inputs.rows() == 0 {
        return Err(PerturbError::EmptyValidationSet);
    }
    let mut mean_scores = Vec::with_capacity(EPSILON_GRID.len());
    for &eps in EPSILON_GRID.iter() {
        let perturbed = perturb(score, inputs, eps)?;
        let values = score_values(score, &perturbed)?;
        mean_scores.push(values.iter().sum::<f64>() / values.len() as f64);
    }
    let mut best = 0;
    for (i, &m) in mean_scores.iter().enumerate().skip(1) {
        if m > mean_scores[best] {
            best = i;
        }
    }
    let argmax_epsilon = EPSILON_GRID[best];
    Ok(EpsilonSearchResult {
        grid: EPSILON_GRID.to_vec(),
        mean_scores,
        argmax_epsilon,
        epsilon_star: argmax_epsilon / 2.0,
        score_fn: score.name(),
    })
}
