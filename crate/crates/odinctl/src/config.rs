//! Experiment configuration: a sectioned key-value file (TOML; JSON accepted
//! as an alternative), normalized into one canonical JSON serialization that
//! is hashed into the config identity embedded in every output file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

use oodkit::deconf::HeadSpec;
use oodkit::model::ModelSpec;
use oodkit::netcore::BackboneSpec;
use oodkit::scorer::ScoreKind;
use oodkit::seeds;
use oodkit::shiftbench::{BenchConfig, ShiftSpec};
use oodkit::trainer::TrainConfig;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(msg) => write!(f, "config io: {msg}"),
            ConfigError::Parse(msg) => write!(f, "config parse: {msg}"),
            ConfigError::Invalid(msg) => write!(f, "config invalid: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    pub mean_offset_scale: f64,
    pub cov_scale: f64,
    pub rotation_angle: f64,
}

impl Default for ShiftSection {
    fn default() -> Self {
        let s = ShiftSpec::default();
        ShiftSection {
            mean_offset_scale: s.mean_offset_scale,
            cov_scale: s.cov_scale,
            rotation_angle: s.rotation_angle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub input_dim: usize,
    pub id_classes: usize,
    pub heldout_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub ood_per_class: usize,
    pub noise_samples: usize,
    pub center_radius: f64,
    pub class_stddev: f64,
    pub shift: ShiftSection,
}

impl Default for BenchSection {
    fn default() -> Self {
        let c = BenchConfig::default();
        BenchSection {
            input_dim: c.input_dim,
            id_classes: c.id_classes,
            heldout_classes: c.heldout_classes,
            train_per_class: c.train_per_class,
            val_per_class: c.val_per_class,
            ood_per_class: c.ood_per_class,
            noise_samples: c.noise_samples,
            center_radius: c.center_radius,
            class_stddev: c.class_stddev,
            shift: ShiftSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub hidden_dims: Vec<usize>,
    pub use_batchnorm: bool,
    pub head_dropout: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection { hidden_dims: vec![64, 64], use_batchnorm: true, head_dropout: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    /// One of I, E, C, PlainI, PlainE, PlainC.
    pub variant: String,
    pub g_batchnorm: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { variant: "C".into(), g_batchnorm: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_points: Vec<f64>,
    pub decay_divisor: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 128,
            epochs: 60,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_points: vec![0.5, 0.75],
            decay_divisor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub score_fns: Vec<String>,
    pub preprocess: bool,
    pub odin_temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            score_fns: ScoreKind::all().iter().map(|k| k.as_str().to_string()).collect(),
            preprocess: true,
            odin_temperature: oodkit::scorer::DEFAULT_ODIN_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub bench: BenchSection,
    pub backbone: BackboneSection,
    pub head: HeadSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Loads TOML (default) or JSON (by `.json` extension or a leading `{`).
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
    }

    pub fn parse(text: &str, prefer_json: bool) -> Result<ExperimentConfig, ConfigError> {
        let looks_json = prefer_json || text.trim_start().starts_with('{');
        let cfg: ExperimentConfig = if looks_json {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bench_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_spec()?.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.score_kinds()?;
        if !(self.eval.odin_temperature > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "odin_temperature must be positive, got {}",
                self.eval.odin_temperature
            )));
        }
        Ok(())
    }

    /// One canonical serialization; this exact byte sequence is hashed.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization cannot fail")
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            input_dim: self.bench.input_dim,
            id_classes: self.bench.id_classes,
            heldout_classes: self.bench.heldout_classes,
            train_per_class: self.bench.train_per_class,
            val_per_class: self.bench.val_per_class,
            ood_per_class: self.bench.ood_per_class,
            noise_samples: self.bench.noise_samples,
            center_radius: self.bench.center_radius,
            class_stddev: self.bench.class_stddev,
            shift: ShiftSpec {
                mean_offset_scale: self.bench.shift.mean_offset_scale,
                cov_scale: self.bench.shift.cov_scale,
                rotation_angle: self.bench.shift.rotation_angle,
            },
            seed: seeds::derive(self.seed, "bench"),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let (similarity, g_enabled) = HeadSpec::parse_variant(&self.head.variant)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let backbone = BackboneSpec {
            input_dim: self.bench.input_dim,
            hidden_dims: self.backbone.hidden_dims.clone(),
            use_batchnorm: self.backbone.use_batchnorm,
            head_dropout: self.backbone.head_dropout,
        };
        let feature_dim = backbone.feature_dim();
        Ok(ModelSpec {
            backbone,
            head: HeadSpec {
                similarity,
                num_classes: self.bench.id_classes,
                feature_dim,
                g_enabled,
                g_batchnorm: self.head.g_batchnorm,
            },
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            lr_drop_points: self.train.lr_drop_points.clone(),
            decay_divisor: self.train.decay_divisor,
            seed: seeds::derive(self.seed, "train"),
        }
    }

    pub fn score_kinds(&self) -> Result<Vec<ScoreKind>, ConfigError> {
        let mut kinds = Vec::new();
        for name in &self.eval.score_fns {
            let kind = ScoreKind::parse(name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown score fn '{name}'")))?;
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        if kinds.is_empty() {
            return Err(ConfigError::Invalid("score_fns must be nonempty".into()));
        }
        Ok(kinds)
    }
}
