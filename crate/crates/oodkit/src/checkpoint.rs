//! Versioned, self-describing model checkpoints.
//!
//! The document form is decoupled from the runtime types so the on-disk
//! layout stays stable; JSON round-trips are bit-exact for every parameter
//! and running statistic (serde_json emits shortest round-trip floats).

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::deconf::{Divisor, Head};
use crate::model::{Model, ModelSpec};
use crate::netcore::{BatchNorm, Layer};
use crate::numgrad::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    Version { found: u32, expected: u32 },
    Parse(String),
    Invalid(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Version { found, expected } => {
                write!(f, "checkpoint version {found} does not match expected {expected}")
            }
            CheckpointError::Parse(msg) => write!(f, "checkpoint parse error: {msg}"),
            CheckpointError::Invalid(msg) => write!(f, "invalid checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorDoc {
    fn from_tensor(t: &Tensor) -> TensorDoc {
        TensorDoc { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    fn into_tensor(self) -> Result<Tensor, CheckpointError> {
        Tensor::new(self.shape, self.data).map_err(|e| CheckpointError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnDoc {
    pub gamma: TensorDoc,
    pub beta: TensorDoc,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnDoc {
    fn from_bn(bn: &BatchNorm) -> BnDoc {
        BnDoc {
            gamma: TensorDoc::from_tensor(&bn.gamma),
            beta: TensorDoc::from_tensor(&bn.beta),
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
            momentum: bn.momentum,
            eps: bn.eps,
        }
    }

    fn into_bn(self) -> Result<BatchNorm, CheckpointError> {
        Ok(BatchNorm {
            gamma: self.gamma.into_tensor()?,
            beta: self.beta.into_tensor()?,
            running_mean: self.running_mean,
            running_var: self.running_var,
            momentum: self.momentum,
            eps: self.eps,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDoc {
    pub weight: TensorDoc,
    pub bias: TensorDoc,
    pub bn: Option<BnDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivisorDoc {
    pub weight: TensorDoc,
    pub bias: TensorDoc,
    pub bn: Option<BnDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadDoc {
    pub class_weights: TensorDoc,
    pub class_bias: Option<TensorDoc>,
    pub divisor: Option<DivisorDoc>,
}

/// The on-disk checkpoint: spec, parameters, BN running stats, and the seed
/// that produced the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub spec: ModelSpec,
    pub layers: Vec<LayerDoc>,
    pub head: HeadDoc,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            spec: model.spec(),
            layers: model
                .backbone
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weight: TensorDoc::from_tensor(&l.weight),
                    bias: TensorDoc::from_tensor(&l.bias),
                    bn: l.bn.as_ref().map(BnDoc::from_bn),
                })
                .collect(),
            head: HeadDoc {
                class_weights: TensorDoc::from_tensor(&model.head.class_weights),
                class_bias: model.head.class_bias.as_ref().map(TensorDoc::from_tensor),
                divisor: model.head.divisor.as_ref().map(|d| DivisorDoc {
                    weight: TensorDoc::from_tensor(&d.weight),
                    bias: TensorDoc::from_tensor(&d.bias),
                    bn: d.bn.as_ref().map(BnDoc::from_bn),
                }),
            },
        }
    }

    pub fn into_model(self) -> Result<Model, CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        self.spec.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if self.layers.len() != self.spec.backbone.hidden_dims.len() {
            return Err(CheckpointError::Invalid(format!(
                "{} layers for {} hidden dims",
                self.layers.len(),
                self.spec.backbone.hidden_dims.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut fan_in = self.spec.backbone.input_dim;
        for (doc, &out) in self.layers.into_iter().zip(&self.spec.backbone.hidden_dims) {
            let weight = doc.weight.into_tensor()?;
            if weight.shape() != [out, fan_in] {
                return Err(CheckpointError::Invalid(format!(
                    "layer weight shape {:?}, expected [{out},{fan_in}]",
                    weight.shape()
                )));
            }
            layers.push(Layer {
                weight,
                bias: doc.bias.into_tensor()?,
                bn: doc.bn.map(BnDoc::into_bn).transpose()?,
            });
            fan_in = out;
        }
        let head = Head {
            spec: self.spec.head.clone(),
            class_weights: self.head.class_weights.into_tensor()?,
            class_bias: self.head.class_bias.map(TensorDoc::into_tensor).transpose()?,
            divisor: self
                .head
                .divisor
                .map(|d| {
                    Ok::<_, CheckpointError>(Divisor {
                        weight: d.weight.into_tensor()?,
                        bias: d.bias.into_tensor()?,
                        bn: d.bn.map(BnDoc::into_bn).transpose()?,
                    })
                })
                .transpose()?,
        };
        if head.class_weights.shape() != [self.spec.head.num_classes, self.spec.head.feature_dim] {
            return Err(CheckpointError::Invalid(format!(
                "class weights shape {:?}, expected [{},{}]",
                head.class_weights.shape(),
                self.spec.head.num_classes,
                self.spec.head.feature_dim
            )));
        }
        Ok(Model {
            backbone: crate::netcore::Backbone { spec: self.spec.backbone, layers },
            head,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Checkpoint, CheckpointError> {
        serde_json::from_str(s).map_err(|e| CheckpointError::Parse(e.to_string()))
    }
}
