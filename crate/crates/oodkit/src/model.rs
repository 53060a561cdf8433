//! Backbone + head assembly: init, tape binding, canonical parameter
//! enumeration, and train-time state updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deconf::{BoundHead, Head, HeadOutput, HeadSpec};
use crate::netcore::{
    dropout, Backbone, BackboneSpec, BatchStats, BoundBackbone, FeatureBundle, InvalidSpec, Mode,
};
use crate::numgrad::{NumError, Tape, Tensor};
use crate::seeds;

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.head.feature_dim != self.backbone.feature_dim() {
            return Err(InvalidSpec(format!(
                "head feature_dim {} does not match backbone feature dim {}",
                self.head.feature_dim,
                self.backbone.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Which update rule a parameter belongs to. Head class weights are the
/// class centroids and are excluded from weight decay; divisor decay is a
/// config choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamTag {
    Backbone,
    HeadClass,
    Divisor,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub tag: ParamTag,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
    pub tag: ParamTag,
}

/// A trained (or training) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: Head,
}

impl Model {
    /// He-initialized model from a validated spec; all randomness comes from
    /// the `init` stream of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model, InvalidSpec> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "init"));
        let backbone = Backbone::init(spec.backbone, &mut rng)?;
        let head = Head::init(spec.head, &mut rng)?;
        Ok(Model { backbone, head })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec { backbone: self.backbone.spec.clone(), head: self.head.spec.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.head.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.spec.input_dim
    }

    /// Parameters in canonical order: backbone layers (weight, bias, BN gamma,
    /// BN beta), then head class weights, class bias, divisor weight, bias,
    /// divisor BN gamma, beta. Binding and gradient collection follow the
    /// same order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            out.push(ParamRef {
                name: format!("backbone.{i}.weight"),
                tensor: &layer.weight,
                tag: ParamTag::Backbone,
            });
            out.push(ParamRef {
                name: format!("backbone.{i}.bias"),
                tensor: &layer.bias,
                tag: ParamTag::Backbone,
            });
            if let Some(bn) = &layer.bn {
                out.push(ParamRef {
                    name: format!("backbone.{i}.bn.gamma"),
                    tensor: &bn.gamma,
                    tag: ParamTag::Backbone,
                });
                out.push(ParamRef {
                    name: format!("backbone.{i}.bn.beta"),
                    tensor: &bn.beta,
                    tag: ParamTag::Backbone,
                });
            }
        }
        out.push(ParamRef {
            name: "head.class_weights".into(),
            tensor: &self.head.class_weights,
            tag: ParamTag::HeadClass,
        });
        if let Some(b) = &self.head.class_bias {
            out.push(ParamRef { name: "head.class_bias".into(), tensor: b, tag: ParamTag::HeadClass });
        }
        if let Some(div) = &self.head.divisor {
            out.push(ParamRef {
                name: "head.divisor.weight".into(),
                tensor: &div.weight,
                tag: ParamTag::Divisor,
            });
            out.push(ParamRef {
                name: "head.divisor.bias".into(),
                tensor: &div.bias,
                tag: ParamTag::Divisor,
            });
            if let Some(bn) = &div.bn {
                out.push(ParamRef {
                    name: "head.divisor.bn.gamma".into(),
                    tensor: &bn.gamma,
                    tag: ParamTag::Divisor,
                });
                out.push(ParamRef {
                    name: "head.divisor.bn.beta".into(),
                    tensor: &bn.beta,
                    tag: ParamTag::Divisor,
                });
            }
        }
        out
    }

    /// Mutable view of the parameters, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("backbone.{i}.weight"),
                tensor: &mut layer.weight,
                tag: ParamTag::Backbone,
            });
            out.push(ParamMut {
                name: format!("backbone.{i}.bias"),
                tensor: &mut layer.bias,
                tag: ParamTag::Backbone,
            });
            if let Some(bn) = &mut layer.bn {
                out.push(ParamMut {
                    name: format!("backbone.{i}.bn.gamma"),
                    tensor: &mut bn.gamma,
                    tag: ParamTag::Backbone,
                });
                out.push(ParamMut {
                    name: format!("backbone.{i}.bn.beta"),
                    tensor: &mut bn.beta,
                    tag: ParamTag::Backbone,
                });
            }
        }
        out.push(ParamMut {
            name: "head.class_weights".into(),
            tensor: &mut self.head.class_weights,
            tag: ParamTag::HeadClass,
        });
        if let Some(b) = &mut self.head.class_bias {
            out.push(ParamMut { name: "head.class_bias".into(), tensor: b, tag: ParamTag::HeadClass });
        }
        if let Some(div) = &mut self.head.divisor {
            out.push(ParamMut {
                name: "head.divisor.weight".into(),
                tensor: &mut div.weight,
                tag: ParamTag::Divisor,
            });
            out.push(ParamMut {
                name: "head.divisor.bias".into(),
                tensor: &mut div.bias,
                tag: ParamTag::Divisor,
            });
            if let Some(bn) = &mut div.bn {
                out.push(ParamMut {
                    name: "head.divisor.bn.gamma".into(),
                    tensor: &mut bn.gamma,
                    tag: ParamTag::Divisor,
                });
                out.push(ParamMut {
                    name: "head.divisor.bn.beta".into(),
                    tensor: &mut bn.beta,
                    tag: ParamTag::Divisor,
                });
            }
        }
        out
    }

    /// Clones parameters onto the tape; watched (differentiable) iff
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
            head_dropout: self.backbone.spec.head_dropout,
        }
    }

    /// Folds train-mode BN batch statistics into the running estimates.
    pub fn apply_bn_updates(
        &mut self,
        backbone_bn: &[Option<BatchStats>],
        g_bn: &Option<BatchStats>,
    ) {
        self.backbone.apply_bn_updates(backbone_bn);
        self.head.apply_bn_update(g_bn);
    }
}

/// A model bound to a tape for one forward pass.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub head: BoundHead,
    head_dropout: f64,
}

/// Everything one model forward produces.
pub struct ForwardOutput {
    pub features: FeatureBundle,
    pub head: HeadOutput,
    pub backbone_bn: Vec<Option<BatchStats>>,
}

impl BoundModel {
    /// Train-mode forward: batch-stat BN, dropout on the head input.
    pub fn forward_train<R: rand::Rng>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<ForwardOutput, NumError> {
        let (features, backbone_bn) = self.backbone.forward(tape, x, Mode::Train)?;
        let head_in = if self.head_dropout > 0.0 {
            dropout(tape, &features.penultimate, self.head_dropout, Mode::Train, rng)?
        } else {
            features.penultimate.clone()
        };
        let head = self.head.forward(tape, &head_in, Mode::Train)?;
        Ok(ForwardOutput { features, head, backbone_bn })
    }

    /// Eval-mode forward: running-stat BN, no dropout. A pure function of
    /// (weights, running stats, x).
    pub fn forward_eval(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardOutput, NumError> {
        let (features, backbone_bn) = self.backbone.forward(tape, x, Mode::Eval)?;
        let head = self.head.forward(tape, &features.penultimate, Mode::Eval)?;
        Ok(ForwardOutput { features, head, backbone_bn })
    }

    /// Bound parameter tensors in the canonical order of [`Model::params`];
    /// pass these to [`Tape::grad`] to collect aligned gradients.
    pub fn watched_params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.backbone.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(bn) = &layer.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.head.class_weights);
        if let Some(b) = &self.head.class_bias {
            out.push(b);
        }
        if let Some(div) = &self.head.divisor {
            out.push(&div.weight);
            out.push(&div.bias);
            if let Some(bn) = &div.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }
}
