//! Seeded synthetic benchmark generator.
//!
//! In-distribution classes are Gaussian clusters centered on a hypersphere.
//! OoD sets realize the shift taxonomy: semantic (held-out class centers),
//! non-semantic (ID generators under a fixed appearance transform), both at
//! once, plus uniform and Gaussian noise. All splits share the affine
//! standardization fitted on the train split, so perturbation magnitudes are
//! commensurate across sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::numgrad::Tensor;
use crate::seeds;

/// Split identity. Labels exist only for Train/Val.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetTag {
    Train,
    Val,
    OodSemantic,
    OodNonsemantic,
    OodBoth,
    OodUniform,
    OodGaussian,
}

impl SetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SetTag::Train => "train",
            SetTag::Val => "val",
            SetTag::OodSemantic => "ood-semantic",
            SetTag::OodNonsemantic => "ood-nonsemantic",
            SetTag::OodBoth => "ood-both",
            SetTag::OodUniform => "ood-uniform",
            SetTag::OodGaussian => "ood-gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<SetTag> {
        Some(match s {
            "train" => SetTag::Train,
            "val" => SetTag::Val,
            "ood-semantic" => SetTag::OodSemantic,
            "ood-nonsemantic" => SetTag::OodNonsemantic,
            "ood-both" => SetTag::OodBoth,
            "ood-uniform" => SetTag::OodUniform,
            "ood-gaussian" => SetTag::OodGaussian,
            _ => return None,
        })
    }

    pub fn all() -> [SetTag; 7] {
        [
            SetTag::Train,
            SetTag::Val,
            SetTag::OodSemantic,
            SetTag::OodNonsemantic,
            SetTag::OodBoth,
            SetTag::OodUniform,
            SetTag::OodGaussian,
        ]
    }

    pub fn ood_tags() -> [SetTag; 5] {
        [
            SetTag::OodSemantic,
            SetTag::OodNonsemantic,
            SetTag::OodBoth,
            SetTag::OodUniform,
            SetTag::OodGaussian,
        ]
    }

    pub fn is_ood(self) -> bool {
        !matches!(self, SetTag::Train | SetTag::Val)
    }
}

impl fmt::Display for SetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Appearance transform producing the non-semantic shift: a fixed mean offset
/// along a seeded random direction, a covariance scale, and an optional
/// rotation in a seeded random plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Offset length as a fraction of the center radius.
    pub mean_offset_scale: f64,
    /// Multiplier on the within-class covariance.
    pub cov_scale: f64,
    /// Rotation angle in radians applied within a random 2-D plane.
    pub rotation_angle: f64,
}

impl Default for ShiftSpec {
    fn default() -> ShiftSpec {
        ShiftSpec { mean_offset_scale: 0.5, cov_scale: 2.0, rotation_angle: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub input_dim: usize,
    pub id_classes: usize,
    pub heldout_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Per-class sample count for the class-based OoD sets.
    pub ood_per_class: usize,
    /// Sample count for each of the uniform and Gaussian noise sets.
    pub noise_samples: usize,
    pub center_radius: f64,
    pub class_stddev: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            input_dim: 16,
            id_classes: 8,
            heldout_classes: 4,
            train_per_class: 200,
            val_per_class: 50,
            ood_per_class: 50,
            noise_samples: 400,
            center_radius: 3.0,
            class_stddev: 1.0,
            shift: ShiftSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchError {
    TooFewClasses { got: usize },
    InvalidConfig(String),
    Csv(String),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::TooFewClasses { got } => {
                write!(f, "need at least 2 ID classes, got {got}")
            }
            BenchError::InvalidConfig(msg) => write!(f, "invalid bench config: {msg}"),
            BenchError::Csv(msg) => write!(f, "dataset csv: {msg}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl BenchConfig {
    /// Class indices of the in-distribution label set {y}.
    pub fn id_class_indices(&self) -> std::ops::Range<usize> {
        0..self.id_classes
    }

    /// Class indices of the held-out set {y-bar}; disjoint from the ID set by
    /// construction.
    pub fn heldout_class_indices(&self) -> std::ops::Range<usize> {
        self.id_classes..self.id_classes + self.heldout_classes
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.id_classes < 2 {
            return Err(BenchError::TooFewClasses { got: self.id_classes });
        }
        if self.heldout_classes < 1 {
            return Err(BenchError::InvalidConfig("need at least 1 held-out class".into()));
        }
        if self.input_dim < 1 {
            return Err(BenchError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.train_per_class < 2 || self.val_per_class < 1 {
            return Err(BenchError::InvalidConfig(
                "need >= 2 train and >= 1 val samples per class".into(),
            ));
        }
        if self.ood_per_class < 1 || self.noise_samples < 1 {
            return Err(BenchError::InvalidConfig("OoD sets must be nonempty".into()));
        }
        if self.class_stddev <= 0.0 || self.center_radius < 0.0 {
            return Err(BenchError::InvalidConfig("bad geometry parameters".into()));
        }
        Ok(())
    }
}

/// A split: inputs `[N, k]`, labels for ID splits only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub tag: SetTag,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The affine map fitted on the train split and applied to every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A generated benchmark: all splits plus the standardization that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Bench {
    pub sets: BTreeMap<SetTag, LabeledSet>,
    pub standardizer: Standardizer,
}

impl Bench {
    pub fn ood_sets(&self) -> BTreeMap<SetTag, &LabeledSet> {
        self.sets.iter().filter(|(t, _)| t.is_ood()).map(|(t, s)| (*t, s)).collect()
    }
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn stream(cfg_seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::derive(cfg_seed, tag))
}

/// Rotation in the (e1, e2) plane by `angle`.
struct PlaneRotation {
    e1: Vec<f64>,
    e2: Vec<f64>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn new<R: Rng>(dim: usize, angle: f64, rng: &mut R) -> Option<PlaneRotation> {
        if angle == 0.0 || dim < 2 {
            return None;
        }
        let e1 = unit_vector(dim, rng);
        // Gram-Schmidt a second direction against e1.
        let e2 = loop {
            let raw = unit_vector(dim, rng);
            let proj: f64 = raw.iter().zip(&e1).map(|(a, b)| a * b).sum();
            let mut ortho: Vec<f64> =
                raw.iter().zip(&e1).map(|(a, b)| a - proj * b).collect();
            let norm = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for v in &mut ortho {
                    *v /= norm;
                }
                break ortho;
            }
        };
        Some(PlaneRotation { e1, e2, cos: angle.cos(), sin: angle.sin() })
    }

    fn apply(&self, x: &mut [f64]) {
        let p1: f64 = x.iter().zip(&self.e1).map(|(a, b)| a * b).sum();
        let p2: f64 = x.iter().zip(&self.e2).map(|(a, b)| a * b).sum();
        let q1 = self.cos * p1 - self.sin * p2;
        let q2 = self.sin * p1 + self.cos * p2;
        for i in 0..x.len() {
            x[i] += (q1 - p1) * self.e1[i] + (q2 - p2) * self.e2[i];
        }
    }
}

/// Generates every split. A pure function of the config: the same config is
/// byte-identical across calls.
pub fn generate(cfg: &BenchConfig) -> Result<Bench, BenchError> {
    cfg.validate()?;
    let k = cfg.input_dim;

    // Class centers on a radius-r hypersphere; held-out centers come from an
    // independent stream so they are identical across ablation slices.
    let mut id_center_rng = stream(cfg.seed, "id-centers");
    let id_centers: Vec<Vec<f64>> = (0..cfg.id_classes)
        .map(|_| unit_vector(k, &mut id_center_rng).iter().map(|v| v * cfg.center_radius).collect())
        .collect();
    let mut ho_center_rng = stream(cfg.seed, "heldout-centers");
    let heldout_centers: Vec<Vec<f64>> = (0..cfg.heldout_classes)
        .map(|_| unit_vector(k, &mut ho_center_rng).iter().map(|v| v * cfg.center_radius).collect())
        .collect();

    // Non-semantic transform pieces.
    let mut shift_rng = stream(cfg.seed, "shift");
    let offset_dir = unit_vector(k, &mut shift_rng);
    let offset: Vec<f64> = offset_dir
        .iter()
        .map(|v| v * cfg.shift.mean_offset_scale * cfg.center_radius)
        .collect();
    let rotation = PlaneRotation::new(k, cfg.shift.rotation_angle, &mut shift_rng);
    let cov_stddev = cfg.class_stddev * cfg.shift.cov_scale.sqrt();

    let sample_cluster = |center: &[f64], stddev: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..k)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                center[j] + stddev * z
            })
            .collect()
    };
    let sample_shifted = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut noise: Vec<f64> = (0..k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                cov_stddev * z
            })
            .collect();
        if let Some(rot) = &rotation {
            rot.apply(&mut noise);
        }
        (0..k).map(|j| center[j] + offset[j] + noise[j]).collect()
    };

    let labeled_split = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::with_capacity(cfg.id_classes * per_class * k);
        let mut labels = Vec::with_capacity(cfg.id_classes * per_class);
        for (class, center) in id_centers.iter().enumerate() {
            for _ in 0..per_class {
                rows.extend(sample_cluster(center, cfg.class_stddev, rng));
                labels.push(class);
            }
        }
        (rows, labels)
    };

    let mut train_rng = stream(cfg.seed, "samples-train");
    let (train_rows, train_labels) = labeled_split(cfg.train_per_class, &mut train_rng);
    let mut val_rng = stream(cfg.seed, "samples-val");
    let (val_rows, val_labels) = labeled_split(cfg.val_per_class, &mut val_rng);

    let mut sem_rng = stream(cfg.seed, "ood-semantic");
    let mut sem_rows = Vec::new();
    for center in &heldout_centers {
        for _ in 0..cfg.ood_per_class {
            sem_rows.extend(sample_cluster(center, cfg.class_stddev, &mut sem_rng));
        }
    }

    let mut nonsem_rng = stream(cfg.seed, "ood-nonsemantic");
    let mut nonsem_rows = Vec::new();
    for center in &id_centers {
        for _ in 0..cfg.ood_per_class {
            nonsem_rows.extend(sample_shifted(center, &mut nonsem_rng));
        }
    }

    let mut both_rng = stream(cfg.seed, "ood-both");
    let mut both_rows = Vec::new();
    for center in &heldout_centers {
        for _ in 0..cfg.ood_per_class {
            both_rows.extend(sample_shifted(center, &mut both_rng));
        }
    }

    // Standardization fitted on train only (population variance), then
    // applied to every generated split.
    let n_train = train_labels.len();
    let mut mean = vec![0.0; k];
    for r in 0..n_train {
        for j in 0..k {
            mean[j] += train_rows[r * k + j];
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut var = vec![0.0; k];
    for r in 0..n_train {
        for j in 0..k {
            let d = train_rows[r * k + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n_train as f64).sqrt().max(1e-12)).collect();
    let standardizer = Standardizer { mean, std };
    let apply = |rows: Vec<f64>| -> Vec<f64> {
        rows.chunks(k)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - standardizer.mean[j]) / standardizer.std[j])
                    .collect::<Vec<f64>>()
            })
            .collect()
    };

    let train_rows = apply(train_rows);
    let val_rows = apply(val_rows);
    let sem_rows = apply(sem_rows);
    let nonsem_rows = apply(nonsem_rows);
    let both_rows = apply(both_rows);

    // Uniform noise over the standardized train bounding box.
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for row in train_rows.chunks(k) {
        for j in 0..k {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let mut uniform_rng = stream(cfg.seed, "ood-uniform");
    let uniform_rows: Vec<f64> = (0..cfg.noise_samples)
        .flat_map(|_| {
            (0..k)
                .map(|j| uniform_rng.random::<f64>() * (hi[j] - lo[j]) + lo[j])
                .collect::<Vec<f64>>()
        })
        .collect();

    // Isotropic standard normal in standardized coordinates.
    let mut gauss_rng = stream(cfg.seed, "ood-gaussian");
    let gauss_rows: Vec<f64> = (0..cfg.noise_samples * k)
        .map(|_| StandardNormal.sample(&mut gauss_rng))
        .collect();

    let tensor = |rows: Vec<f64>, tag: SetTag| -> Result<Tensor, BenchError> {
        let n = rows.len() / k;
        Tensor::matrix(n, k, rows)
            .map_err(|e| BenchError::InvalidConfig(format!("{tag}: {e}")))
    };

    let mut sets = BTreeMap::new();
    sets.insert(
        SetTag::Train,
        LabeledSet {
            inputs: tensor(train_rows, SetTag::Train)?,
            labels: Some(train_labels),
            tag: SetTag::Train,
        },
    );
    sets.insert(
        SetTag::Val,
        LabeledSet {
            inputs: tensor(val_rows, SetTag::Val)?,
            labels: Some(val_labels),
            tag: SetTag::Val,
        },
    );
    sets.insert(
        SetTag::OodSemantic,
        LabeledSet { inputs: tensor(sem_rows, SetTag::OodSemantic)?, labels: None, tag: SetTag::OodSemantic },
    );
    sets.insert(
        SetTag::OodNonsemantic,
        LabeledSet {
            inputs: tensor(nonsem_rows, SetTag::OodNonsemantic)?,
            labels: None,
            tag: SetTag::OodNonsemantic,
        },
    );
    sets.insert(
        SetTag::OodBoth,
        LabeledSet { inputs: tensor(both_rows, SetTag::OodBoth)?, labels: None, tag: SetTag::OodBoth },
    );
    sets.insert(
        SetTag::OodUniform,
        LabeledSet {
            inputs: tensor(uniform_rows, SetTag::OodUniform)?,
            labels: None,
            tag: SetTag::OodUniform,
        },
    );
    sets.insert(
        SetTag::OodGaussian,
        LabeledSet {
            inputs: tensor(gauss_rows, SetTag::OodGaussian)?,
            labels: None,
            tag: SetTag::OodGaussian,
        },
    );

    Ok(Bench { sets, standardizer })
}

/// Axis along which a robustness sweep varies the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    NumSamples,
    NumClasses,
}

/// Derived configs varying one axis, everything else (including the seed
/// derivation scheme, hence the held-out OoD generators) fixed.
pub fn ablation_slices(cfg: &BenchConfig, axis: SweepAxis, grid: &[usize]) -> Vec<BenchConfig> {
    grid.iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match axis {
                SweepAxis::NumSamples => c.train_per_class = v,
                SweepAxis::NumClasses => c.id_classes = v,
            }
            c
        })
        .collect()
}

/// One CSV over all splits: `feature_0,...,feature_{k-1},label,tag`, label
/// empty for unlabeled sets.
pub fn to_csv(bench: &Bench) -> String {
    let mut out = String::new();
    let k = bench.sets[&SetTag::Train].inputs.cols();
    out.push_str(&(0..k).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","));
    out.push_str(",label,tag\n");
    for set in bench.sets.values() {
        for r in 0..set.len() {
            let row = set.inputs.row(r);
            out.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
            match &set.labels {
                Some(labels) => out.push_str(&format!(",{},{}\n", labels[r], set.tag)),
                None => out.push_str(&format!(",,{}\n", set.tag)),
            }
        }
    }
    out
}

/// Inverse of [`to_csv`]; rebuilds the split map (not the standardizer).
pub fn from_csv(s: &str) -> Result<BTreeMap<SetTag, LabeledSet>, BenchError> {
    let mut lines = s.lines().filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| BenchError::Csv("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "tag" {
        return Err(BenchError::Csv("expected header x0,...,label,tag".into()));
    }
    let k = cols.len() - 2;
    let mut rows: BTreeMap<SetTag, (Vec<f64>, Vec<Option<usize>>)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 2 {
            return Err(BenchError::Csv(format!("row {i}: expected {} fields", k + 2)));
        }
        let tag = SetTag::parse(fields[k + 1])
            .ok_or_else(|| BenchError::Csv(format!("row {i}: unknown tag '{}'", fields[k + 1])))?;
        let label = if fields[k].is_empty() {
            None
        } else {
            Some(
                fields[k]
                    .parse::<usize>()
                    .map_err(|e| BenchError::Csv(format!("row {i}: bad label: {e}")))?,
            )
        };
        let entry = rows.entry(tag).or_default();
        for f in &fields[..k] {
            entry.0.push(
                f.parse::<f64>().map_err(|e| BenchError::Csv(format!("row {i}: bad value: {e}")))?,
            );
        }
        entry.1.push(label);
    }
    let mut sets = BTreeMap::new();
    for (tag, (data, labels)) in rows {
        let n = labels.len();
        let inputs = Tensor::matrix(n, k, data).map_err(|e| BenchError::Csv(e.to_string()))?;
        let labels = if labels.iter().all(|l| l.is_some()) {
            Some(labels.into_iter().map(|l| l.unwrap()).collect())
        } else if labels.iter().all(|l| l.is_none()) {
            None
        } else {
            return Err(BenchError::Csv(format!("{tag}: mixed labeled and unlabeled rows")));
        };
        sets.insert(tag, LabeledSet { inputs, labels, tag });
    }
    Ok(sets)
}
