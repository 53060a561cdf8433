//! Detection metrics and report assembly.
//!
//! AUROC is the Mann-Whitney rank statistic with midrank ties, exactly the
//! pairwise P(s_ID > s_OoD) + 0.5 P(tie); TNR@TPR95 sweeps candidate
//! thresholds so the retained ID fraction stays at or above the target.
//! Scores follow the convention higher = more in-distribution.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::perturb::{perturb, PerturbError};
use crate::scorer::{score_values, Score, ScoreError};
use crate::shiftbench::{LabeledSet, SetTag};

pub const HISTOGRAM_BINS: usize = 50;
pub const REPORT_SCHEMA: &str = "detection-report/v1";

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyScores,
    BadTpr(f64),
    NonFiniteScore,
    MissingOodSets,
    Score(ScoreError),
    Perturb(PerturbError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyScores => write!(f, "metric inputs must be nonempty"),
            EvalError::BadTpr(t) => write!(f, "target TPR must lie in (0,1), got {t}"),
            EvalError::NonFiniteScore => write!(f, "scores must be finite"),
            EvalError::MissingOodSets => write!(f, "evaluation needs at least one OoD set"),
            EvalError::Score(e) => write!(f, "{e}"),
            EvalError::Perturb(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ScoreError> for EvalError {
    fn from(e: ScoreError) -> EvalError {
        EvalError::Score(e)
    }
}

impl From<PerturbError> for EvalError {
    fn from(e: PerturbError) -> EvalError {
        EvalError::Perturb(e)
    }
}

fn check_scores(s: &[f64]) -> Result<(), EvalError> {
    if s.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    Ok(())
}

/// AUROC via midrank Mann-Whitney: P(id > ood) + 0.5 P(id == ood).
///
/// Rank sums are accumulated in integers (doubled ranks), so
/// auroc(a, b) + auroc(b, a) == 1 holds exactly.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, EvalError> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    let n = id_scores.len();
    let m = ood_scores.len();
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(n + m);
    all.extend(id_scores.iter().map(|&s| (s, true)));
    all.extend(ood_scores.iter().map(|&s| (s, false)));
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Twice the rank sum of the ID group, exactly (midranks are half-integers).
    let total = all.len();
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && all[j].0 == all[i].0 {
            j += 1;
        }
        // Members of the tie group [i, j) share midrank (i+1 + j) / 2.
        let doubled_midrank = (i + 1 + j) as u64;
        for entry in &all[i..j] {
            if entry.1 {
                doubled_rank_sum += doubled_midrank;
            }
        }
        i = j;
    }
    let doubled_u = doubled_rank_sum - (n as u64) * (n as u64 + 1);
    let denom = 2 * (n as u64) * (m as u64);
    // Symmetric rounding: derive the larger side from the smaller so the two
    // orientations sum to exactly 1.0.
    let value = if 2 * doubled_u <= denom {
        doubled_u as f64 / denom as f64
    } else {
        1.0 - (denom - doubled_u) as f64 / denom as f64
    };
    Ok(value)
}

/// TNR at the given TPR with threshold detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TnrDetail {
    pub threshold: f64,
    pub achieved_tpr: f64,
    pub tnr: f64,
}

/// Threshold sweep: tau is the largest score value for which the fraction of
/// ID scores >= tau stays at or above `tpr`; returns the fraction of OoD
/// scores strictly below tau.
pub fn tnr_at_tpr_detail(
    id_scores: &[f64],
    ood_scores: &[f64],
    tpr: f64,
) -> Result<TnrDetail, EvalError> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    if !(0.0 < tpr && tpr < 1.0) {
        return Err(EvalError::BadTpr(tpr));
    }
    let n = id_scores.len();
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    // Walk distinct values in descending order; the retained count only grows.
    let mut threshold = sorted[n - 1];
    let mut achieved = 1.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let frac = j as f64 / n as f64;
        if frac >= tpr {
            threshold = sorted[i];
            achieved = frac;
            break;
        }
        i = j;
    }
    let rejected = ood_scores.iter().filter(|&&s| s < threshold).count();
    Ok(TnrDetail { threshold, achieved_tpr: achieved, tnr: rejected as f64 / ood_scores.len() as f64 })
}

/// Fraction of OoD rejected while keeping at least `tpr` of the ID samples.
pub fn tnr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64, EvalError> {
    Ok(tnr_at_tpr_detail(id_scores, ood_scores, tpr)?.tnr)
}

/// Fixed-width histogram; ID and OoD pairs share one binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histograms of both score sets over their pooled range.
pub fn histogram_pair(id_scores: &[f64], ood_scores: &[f64]) -> (Histogram, Histogram) {
    let lo = id_scores.iter().chain(ood_scores).cloned().fold(f64::INFINITY, f64::min);
    let hi = id_scores.iter().chain(ood_scores).cloned().fold(f64::NEG_INFINITY, f64::max);
    let fill = |scores: &[f64]| {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &s in scores {
            let bin = if hi > lo {
                (((s - lo) / (hi - lo)) * HISTOGRAM_BINS as f64).floor() as usize
            } else {
                0
            };
            counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        Histogram { lo, hi, counts }
    };
    (fill(id_scores), fill(ood_scores))
}

/// Metrics for one (score function, OoD set) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub score_fn: String,
    pub ood_set: String,
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub achieved_tpr: f64,
    pub epsilon_star: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Mean score change of the ID validation inputs under perturbation.
    pub id_mean_score_delta: f64,
    /// Mean score change of this OoD set under the same perturbation.
    pub ood_mean_score_delta: f64,
    pub id_hist: Histogram,
    pub ood_hist: Histogram,
}

/// The full evaluation artifact, serialized as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema: String,
    pub seed: u64,
    pub config_hash: String,
    /// False when input preprocessing was disabled (the plain ablation).
    pub preprocessing: bool,
    pub entries: Vec<PairReport>,
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<DetectionReport, String> {
        let report: DetectionReport = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if report.schema != REPORT_SCHEMA {
            return Err(format!("unsupported report schema '{}'", report.schema));
        }
        Ok(report)
    }
}

/// Scores produced during one evaluation, exposed for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub tag: SetTag,
    pub scores: Vec<f64>,
}

/// One scorer against every OoD set: perturbs ID validation and OoD inputs
/// with the same epsilon*, scores them, and computes both metrics per pair.
pub fn evaluate(
    score: &dyn Score,
    epsilon_star: f64,
    id_val: &LabeledSet,
    ood_sets: &BTreeMap<SetTag, &LabeledSet>,
) -> Result<(Vec<PairReport>, Vec<ScoredSet>), EvalError> {
    if ood_sets.is_empty() {
        return Err(EvalError::MissingOodSets);
    }
    let id_plain = score_values(score, &id_val.inputs)?;
    let id_perturbed = perturb(score, &id_val.inputs, epsilon_star)?;
    let id_scores = score_values(score, &id_perturbed)?;
    check_scores(&id_scores)?;
    let id_delta = mean(&id_scores) - mean(&id_plain);

    let mut entries = Vec::new();
    let mut scored = vec![ScoredSet { tag: id_val.tag, scores: id_scores.clone() }];
    for (&tag, set) in ood_sets {
        let plain = score_values(score, &set.inputs)?;
        let perturbed = perturb(score, &set.inputs, epsilon_star)?;
        let ood_scores = score_values(score, &perturbed)?;
        check_scores(&ood_scores)?;
        let detail = tnr_at_tpr_detail(&id_scores, &ood_scores, 0.95)?;
        let (id_hist, ood_hist) = histogram_pair(&id_scores, &ood_scores);
        entries.push(PairReport {
            score_fn: score.name(),
            ood_set: tag.as_str().into(),
            auroc: auroc(&id_scores, &ood_scores)?,
            tnr_at_tpr95: detail.tnr,
            achieved_tpr: detail.achieved_tpr,
            epsilon_star,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
            id_mean_score_delta: id_delta,
            ood_mean_score_delta: mean(&ood_scores) - mean(&plain),
            id_hist,
            ood_hist,
        });
        scored.push(ScoredSet { tag, scores: ood_scores });
    }
    Ok((entries, scored))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
