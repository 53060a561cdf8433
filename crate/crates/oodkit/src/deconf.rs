//! The dividend/divisor classifier head.
//!
//! Class evidence `h_i(x)` comes in three variants (inner product, negative
//! squared Euclidean distance, cosine similarity) and is divided by a learned
//! per-sample positive scalar `g(x) = sigmoid(BN(w_g . f^p + b_g))` to form the
//! logits `f_i = h_i / g`. With the divisor disabled (`g == 1`) the inner-product
//! head reduces to a plain linear softmax classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::netcore::{batchnorm_forward, bind_tensor, BatchNorm, BatchStats, InvalidSpec, Mode};
use crate::numgrad::{NumError, Tape, Tensor};
use crate::trainer::he_init;

/// Norm floor for the cosine head; keeps zero-norm features from producing
/// NaN without affecting normal operation.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Similarity measure used for the class evidence h_i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    /// h_i = w_i . f^p + b_i
    Inner,
    /// h_i = -||f^p - w_i||^2
    Euclid,
    /// h_i = (w_i . f^p) / (||w_i|| ||f^p||)
    Cosine,
}

impl Similarity {
    fn letter(self) -> &'static str {
        match self {
            Similarity::Inner => "I",
            Similarity::Euclid => "E",
            Similarity::Cosine => "C",
        }
    }
}

/// Head configuration. `g_enabled == false` is the Plain family (g == 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub similarity: Similarity,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub g_enabled: bool,
    pub g_batchnorm: bool,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        if self.num_classes < 2 {
            return Err(InvalidSpec(format!(
                "head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim < 1 {
            return Err(InvalidSpec("feature_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Variant label: I / E / C with the divisor, PlainI / PlainE / PlainC
    /// without it.
    pub fn variant_name(&self) -> String {
        if self.g_enabled {
            self.similarity.letter().to_string()
        } else {
            format!("Plain{}", self.similarity.letter())
        }
    }

    /// Parses a variant label; accepts `I`, `plain-i`, `PlainI`, etc.
    pub fn parse_variant(s: &str) -> Result<(Similarity, bool), InvalidSpec> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let norm = norm.to_ascii_lowercase();
        let (rest, g_enabled) = match norm.strip_prefix("plain") {
            Some(rest) => (rest, false),
            None => (norm.as_str(), true),
        };
        let sim = match rest {
            "i" => Similarity::Inner,
            "e" => Similarity::Euclid,
            "c" => Similarity::Cosine,
            _ => return Err(InvalidSpec(format!("unknown head variant '{s}'"))),
        };
        Ok((sim, g_enabled))
    }
}

/// Learned head parameters: per-class weights (centroids for E/C), a bias for
/// the inner-product variant only, and the optional divisor branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    /// [C, d]
    pub class_weights: Tensor,
    /// [C]; present only for the inner-product variant.
    pub class_bias: Option<Tensor>,
    pub divisor: Option<Divisor>,
}

/// The g(x) branch: one linear unit, optional 1-feature BN, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Divisor {
    /// [1, d]
    pub weight: Tensor,
    /// [1]
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

impl Head {
    pub fn init<R: Rng>(spec: HeadSpec, rng: &mut R) -> Result<Head, InvalidSpec> {
        spec.validate()?;
        let d = spec.feature_dim;
        let class_weights = he_init(&[spec.num_classes, d], d, rng);
        let class_bias = matches!(spec.similarity, Similarity::Inner)
            .then(|| Tensor::zeros(vec![spec.num_classes]));
        let divisor = spec.g_enabled.then(|| Divisor {
            weight: he_init(&[1, d], d, rng),
            bias: Tensor::zeros(vec![1]),
            bn: spec.g_batchnorm.then(|| BatchNorm::new(1)),
        });
        Ok(Head { spec, class_weights, class_bias, divisor })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        BoundHead {
            similarity: self.spec.similarity,
            class_weights: bind_tensor(tape, &self.class_weights, trainable),
            class_bias: self.class_bias.as_ref().map(|b| bind_tensor(tape, b, trainable)),
            divisor: self.divisor.as_ref().map(|d| BoundDivisor {
                weight: bind_tensor(tape, &d.weight, trainable),
                bias: bind_tensor(tape, &d.bias, trainable),
                bn: d.bn.as_ref().map(|bn| BoundDivisorBn {
                    gamma: bind_tensor(tape, &bn.gamma, trainable),
                    beta: bind_tensor(tape, &bn.beta, trainable),
                    running_mean: bn.running_mean.clone(),
                    running_var: bn.running_var.clone(),
                    eps: bn.eps,
                }),
            }),
        }
    }

    pub fn apply_bn_update(&mut self, stats: &Option<BatchStats>) {
        if let (Some(div), Some(s)) = (self.divisor.as_mut(), stats.as_ref()) {
            if let Some(bn) = div.bn.as_mut() {
                bn.apply_update(s);
            }
        }
    }
}

/// A head bound to a tape for one forward pass.
#[derive(Debug)]
pub struct BoundHead {
    pub similarity: Similarity,
    pub class_weights: Tensor,
    pub class_bias: Option<Tensor>,
    pub divisor: Option<BoundDivisor>,
}

#[derive(Debug)]
pub struct BoundDivisor {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BoundDivisorBn>,
}

#[derive(Debug)]
pub struct BoundDivisorBn {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// Everything one head forward produces.
#[derive(Debug)]
pub struct HeadOutput {
    /// Class evidence h_i, [B, C].
    pub h: Tensor,
    /// Divisor g, [B, 1]; `None` for Plain heads.
    pub g: Option<Tensor>,
    /// Logits f_i = h_i / g (or h_i when g is disabled), [B, C].
    pub logits: Tensor,
    /// Batch stats of the divisor BN during a train pass.
    pub g_bn_stats: Option<BatchStats>,
}

impl BoundHead {
    /// Class evidence h(f^p), [B, C].
    pub fn h(&self, tape: &mut Tape, fp: &Tensor) -> Result<Tensor, NumError> {
        match self.similarity {
            Similarity::Inner => {
                let wt = tape.transpose(&self.class_weights)?;
                let dots = tape.matmul(fp, &wt)?;
                match &self.class_bias {
                    Some(b) => tape.add_row(&dots, b),
                    None => Ok(dots),
                }
            }
            Similarity::Euclid => {
                // -||fp - w_i||^2 = -(||fp||^2 - 2 fp.w_i + ||w_i||^2)
                let wt = tape.transpose(&self.class_weights)?;
                let dots = tape.matmul(fp, &wt)?;
                let fp_sq = {
                    let sq = tape.mul(fp, fp)?;
                    tape.sum_axis1(&sq)?
                };
                let w_sq = {
                    let sq = tape.mul(&self.class_weights, &self.class_weights)?;
                    let col = tape.sum_axis1(&sq)?;
                    let c = col.rows();
                    tape.reshape(&col, vec![c])?
                };
                let t = tape.scale(&dots, -2.0)?;
                let t = tape.add_col(&t, &fp_sq)?;
                let t = tape.add_row(&t, &w_sq)?;
                tape.scale(&t, -1.0)
            }
            Similarity::Cosine => {
                let wt = tape.transpose(&self.class_weights)?;
                let dots = tape.matmul(fp, &wt)?;
                let fp_norm = {
                    let sq = tape.mul(fp, fp)?;
                    let ssq = tape.sum_axis1(&sq)?;
                    let norm = tape.sqrt(&ssq)?;
                    tape.clamp_min(&norm, COSINE_NORM_FLOOR)?
                };
                let w_norm = {
                    let sq = tape.mul(&self.class_weights, &self.class_weights)?;
                    let ssq = tape.sum_axis1(&sq)?;
                    let norm = tape.sqrt(&ssq)?;
                    let clamped = tape.clamp_min(&norm, COSINE_NORM_FLOOR)?;
                    let c = clamped.rows();
                    tape.reshape(&clamped, vec![c])?
                };
                let t = tape.div_row(&dots, &w_norm)?;
                tape.div_col(&t, &fp_norm)
            }
        }
    }

    /// Divisor g(f^p) in (0,1), [B, 1]. Errors if the head has no divisor.
    pub fn g(
        &self,
        tape: &mut Tape,
        fp: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<BatchStats>), NumError> {
        let div = self.divisor.as_ref().ok_or(NumError::Domain {
            op: "divisor",
            detail: "head has no divisor branch (Plain variant)".into(),
        })?;
        let wt = tape.transpose(&div.weight)?;
        let z = tape.matmul(fp, &wt)?;
        let z = tape.add_row(&z, &div.bias)?;
        let (z, stats) = match &div.bn {
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
        let g = tape.sigmoid(&z)?;
        Ok((g, stats))
    }

    /// Full head pass: h, g (when enabled), and logits h/g.
    pub fn forward(&self, tape: &mut Tape, fp: &Tensor, mode: Mode) -> Result<HeadOutput, NumError> {
        let h = self.h(tape, fp)?;
        match self.divisor {
            Some(_) => {
                let (g, g_bn_stats) = self.g(tape, fp, mode)?;
                let logits = logits(tape, &h, &g)?;
                Ok(HeadOutput { h, g: Some(g), logits, g_bn_stats })
            }
            None => Ok(HeadOutput { h: h.clone(), g: None, logits: h, g_bn_stats: None }),
        }
    }
}

/// Logits f_i = h_i / g, broadcast over classes. The divisor must be
/// strictly positive; sigmoid guarantees it, but the contract is checked.
pub fn logits(tape: &mut Tape, h: &Tensor, g: &Tensor) -> Result<Tensor, NumError> {
    if let Some(&bad) = g.data().iter().find(|v| **v <= 0.0) {
        return Err(NumError::Domain {
            op: "logits",
            detail: format!("divisor must be positive, got {bad}"),
        });
    }
    tape.div_col(h, g)
}
