//! The train / eval / sweep / gen-data flows and their on-disk artifacts.
//!
//! Every output file embeds the config hash and seed. Artifact files are
//! append-only: a run refuses to overwrite an existing checkpoint or report,
//! and the default output location is a fresh timestamped directory.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use oodkit::checkpoint::{Checkpoint, CheckpointError};
use oodkit::evalkit::{evaluate, DetectionReport, EvalError, PairReport, REPORT_SCHEMA};
use oodkit::model::Model;
use oodkit::netcore::InvalidSpec;
use oodkit::perturb::{select_epsilon, EpsilonSearchResult, PerturbError};
use oodkit::scorer::{build_scorer, fit_mahalanobis, MahalanobisParams, ScoreError, ScoreKind};
use oodkit::seeds;
use oodkit::shiftbench::{self, Bench, BenchError, SetTag};
use oodkit::trainer::{train, TrainError, TrainHistory};

use crate::config::{ConfigError, ExperimentConfig};

pub const CHECKPOINT_SCHEMA: &str = "checkpoint/v1";

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Io(String),
    Bench(BenchError),
    Spec(InvalidSpec),
    Train(TrainError),
    Score(ScoreError),
    Perturb(PerturbError),
    Eval(EvalError),
    Checkpoint(CheckpointError),
    Schema(String),
    Sweep(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Io(msg) => write!(f, "io: {msg}"),
            RunError::Bench(e) => write!(f, "{e}"),
            RunError::Spec(e) => write!(f, "{e}"),
            RunError::Train(e) => write!(f, "{e}"),
            RunError::Score(e) => write!(f, "{e}"),
            RunError::Perturb(e) => write!(f, "{e}"),
            RunError::Eval(e) => write!(f, "{e}"),
            RunError::Checkpoint(e) => write!(f, "{e}"),
            RunError::Schema(msg) => write!(f, "schema: {msg}"),
            RunError::Sweep(msg) => write!(f, "sweep: {msg}"),
        }
    }
}

impl std::error::Error for RunError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for RunError {
            fn from(e: $ty) -> RunError {
                RunError::$variant(e)
            }
        }
    };
}

from_err!(Config, ConfigError);
from_err!(Bench, BenchError);
from_err!(Spec, InvalidSpec);
from_err!(Train, TrainError);
from_err!(Score, ScoreError);
from_err!(Perturb, PerturbError);
from_err!(Eval, EvalError);
from_err!(Checkpoint, CheckpointError);

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, RunError> {
    std::fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

/// Creates a fresh `prefix-<unix_seconds>[-n]` directory under `base`.
pub fn fresh_run_dir(base: &Path, prefix: &str) -> Result<PathBuf, RunError> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for attempt in 0..10_000u32 {
        let name = if attempt == 0 {
            format!("{prefix}-{stamp}")
        } else {
            format!("{prefix}-{stamp}-{attempt}")
        };
        let dir = base.join(name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir)
                .map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
            return Ok(dir);
        }
    }
    Err(RunError::Io(format!("could not allocate a run directory under {}", base.display())))
}

fn ensure_out_dir(out: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out).map_err(|e| RunError::Io(format!("{}: {e}", out.display())))
}

/// The checkpoint file: model document plus the full config that produced it,
/// so evaluation needs nothing but this file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub model: Checkpoint,
}

impl CheckpointFile {
    pub fn load(path: &Path) -> Result<CheckpointFile, RunError> {
        let text = read_file(path)?;
        let doc: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| RunError::Checkpoint(CheckpointError::Parse(e.to_string())))?;
        if doc.schema != CHECKPOINT_SCHEMA {
            return Err(RunError::Schema(format!(
                "checkpoint schema '{}' does not match '{CHECKPOINT_SCHEMA}'",
                doc.schema
            )));
        }
        Ok(doc)
    }
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub history: TrainHistory,
    pub config_hash: String,
}

/// Trains per the config and writes checkpoint.json, history.csv, and the
/// canonical config snapshot.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainArtifacts, RunError> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    if checkpoint_path.exists() {
        return Err(RunError::Io(format!(
            "{} already exists; runs are append-only",
            checkpoint_path.display()
        )));
    }
    let config_hash = cfg.config_hash();

    let bench = shiftbench::generate(&cfg.bench_config())?;
    let train_set = &bench.sets[&SetTag::Train];
    let val_set = &bench.sets[&SetTag::Val];
    let mut model = Model::init(cfg.model_spec()?, cfg.seed)?;
    let history = train(
        &mut model,
        &train_set.inputs,
        train_set.labels.as_ref().expect("train split is labeled"),
        &val_set.inputs,
        val_set.labels.as_ref().expect("val split is labeled"),
        &cfg.train_config(),
    )?;

    let doc = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.into(),
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        model: Checkpoint::from_model(&model, cfg.seed),
    };
    write_file(
        &checkpoint_path,
        &serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail"),
    )?;
    write_file(
        &out_dir.join("history.csv"),
        &format!("# config_hash={config_hash} seed={}\n{}", cfg.seed, history.to_csv()),
    )?;
    write_file(&out_dir.join("config.snapshot.json"), &cfg.canonical_json())?;
    Ok(TrainArtifacts { checkpoint_path, history, config_hash })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Overrides the config's preprocessing switch.
    pub preprocess: Option<bool>,
    /// Overrides the config's score function list.
    pub score_fns: Option<Vec<ScoreKind>>,
}

pub struct EvalArtifacts {
    pub report_path: PathBuf,
    pub report: DetectionReport,
}

/// Evaluates a checkpoint against every OoD set and writes the report JSON
/// plus score / curve / histogram CSVs.
pub fn run_eval(
    checkpoint_path: &Path,
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<EvalArtifacts, RunError> {
    let doc = CheckpointFile::load(checkpoint_path)?;
    ensure_out_dir(out_dir)?;
    let report_path = out_dir.join("report.json");
    if report_path.exists() {
        return Err(RunError::Io(format!(
            "{} already exists; runs are append-only",
            report_path.display()
        )));
    }

    let cfg = &doc.config;
    let model = doc.model.clone().into_model()?;
    let bench = shiftbench::generate(&cfg.bench_config())?;
    let preprocess = opts.preprocess.unwrap_or(cfg.eval.preprocess);
    let kinds = match &opts.score_fns {
        Some(kinds) => kinds.clone(),
        None => cfg.score_kinds()?,
    };

    let report = evaluate_checkpoint(&model, &bench, cfg, &kinds, preprocess, out_dir, true)?;
    write_file(&report_path, &report.to_json())?;
    Ok(EvalArtifacts { report_path, report })
}

/// Shared evaluation core; `write_csvs` controls the side artifacts.
pub fn evaluate_checkpoint(
    model: &Model,
    bench: &Bench,
    cfg: &ExperimentConfig,
    kinds: &[ScoreKind],
    preprocess: bool,
    out_dir: &Path,
    write_csvs: bool,
) -> Result<DetectionReport, RunError> {
    let config_hash = cfg.config_hash();
    let val = &bench.sets[&SetTag::Val];
    let ood_sets = bench.ood_sets();
    if ood_sets.is_empty() {
        return Err(RunError::Eval(EvalError::MissingOodSets));
    }

    let maha_params: Option<MahalanobisParams> = if kinds.contains(&ScoreKind::Mahalanobis) {
        let train_split = &bench.sets[&SetTag::Train];
        Some(fit_mahalanobis(
            model,
            &train_split.inputs,
            train_split.labels.as_ref().expect("train split is labeled"),
        )?)
    } else {
        None
    };

    let mut entries: Vec<PairReport> = Vec::new();
    for &kind in kinds {
        let scorer = build_scorer(kind, model, cfg.eval.odin_temperature, maha_params.as_ref())?;
        let (epsilon_star, search): (f64, Option<EpsilonSearchResult>) = if preprocess {
            let result = select_epsilon(scorer.as_ref(), val)?;
            (result.epsilon_star, Some(result))
        } else {
            (0.0, None)
        };
        let (pair_reports, scored) = evaluate(scorer.as_ref(), epsilon_star, val, &ood_sets)?;
        if write_csvs {
            if let Some(search) = &search {
                write_file(
                    &out_dir.join(format!("epsilon_curve_{kind}.csv")),
                    &format!("# config_hash={config_hash} seed={}\n{}", cfg.seed, search.to_csv()),
                )?;
            }
            let mut scores_csv =
                format!("# config_hash={config_hash} seed={}\nsample_id,tag,score\n", cfg.seed);
            for set in &scored {
                for (i, s) in set.scores.iter().enumerate() {
                    scores_csv.push_str(&format!("{i},{},{s}\n", set.tag));
                }
            }
            write_file(&out_dir.join(format!("scores_{kind}.csv")), &scores_csv)?;
            for pair in &pair_reports {
                let mut hist_csv = format!(
                    "# config_hash={config_hash} seed={}\nbin,lo,hi,id_count,ood_count\n",
                    cfg.seed
                );
                let bins = pair.id_hist.counts.len();
                let width = if pair.id_hist.hi > pair.id_hist.lo {
                    (pair.id_hist.hi - pair.id_hist.lo) / bins as f64
                } else {
                    0.0
                };
                for b in 0..bins {
                    let lo = pair.id_hist.lo + width * b as f64;
                    hist_csv.push_str(&format!(
                        "{b},{lo},{},{},{}\n",
                        lo + width,
                        pair.id_hist.counts[b],
                        pair.ood_hist.counts[b]
                    ));
                }
                write_file(
                    &out_dir.join(format!("hist_{kind}_{}.csv", pair.ood_set)),
                    &hist_csv,
                )?;
            }
        }
        entries.extend(pair_reports);
    }

    Ok(DetectionReport {
        schema: REPORT_SCHEMA.into(),
        seed: cfg.seed,
        config_hash,
        preprocessing: preprocess,
        entries,
    })
}

/// Sweep axes: benchmark shape, head variant, or regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxisKind {
    NumSamples,
    NumClasses,
    HeadVariant,
    Dropout,
}

impl SweepAxisKind {
    pub fn parse(s: &str) -> Option<SweepAxisKind> {
        Some(match s {
            "num_samples" => SweepAxisKind::NumSamples,
            "num_classes" => SweepAxisKind::NumClasses,
            "head_variant" => SweepAxisKind::HeadVariant,
            "dropout" => SweepAxisKind::Dropout,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxisKind::NumSamples => "num_samples",
            SweepAxisKind::NumClasses => "num_classes",
            SweepAxisKind::HeadVariant => "head_variant",
            SweepAxisKind::Dropout => "dropout",
        }
    }
}

fn sweep_point_config(
    base: &ExperimentConfig,
    axis: SweepAxisKind,
    value: &str,
    index: usize,
) -> Result<ExperimentConfig, RunError> {
    let mut cfg = base.clone();
    match axis {
        SweepAxisKind::NumSamples => {
            cfg.bench.train_per_class = value
                .parse()
                .map_err(|e| RunError::Sweep(format!("bad num_samples '{value}': {e}")))?;
        }
        SweepAxisKind::NumClasses => {
            cfg.bench.id_classes = value
                .parse()
                .map_err(|e| RunError::Sweep(format!("bad num_classes '{value}': {e}")))?;
        }
        SweepAxisKind::HeadVariant => {
            oodkit::deconf::HeadSpec::parse_variant(value)
                .map_err(|e| RunError::Sweep(e.to_string()))?;
            cfg.head.variant = value.to_string();
        }
        SweepAxisKind::Dropout => {
            cfg.backbone.head_dropout = value
                .parse()
                .map_err(|e| RunError::Sweep(format!("bad dropout '{value}': {e}")))?;
        }
    }
    cfg.seed = seeds::derive_indexed(base.seed, "sweep", index as u64);
    Ok(cfg)
}

pub struct SweepArtifacts {
    pub summary_path: PathBuf,
    /// (axis value, status) per point.
    pub points: Vec<(String, String)>,
}

/// Runs train+eval per grid point and aggregates mean metrics across OoD sets
/// into one summary CSV. A failing point is recorded and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxisKind,
    grid: &[String],
    out_dir: &Path,
) -> Result<SweepArtifacts, RunError> {
    if grid.is_empty() {
        return Err(RunError::Sweep("grid must be nonempty".into()));
    }
    base.validate()?;
    ensure_out_dir(out_dir)?;
    let mut summary = format!(
        "# config_hash={} seed={}\naxis,value,score_fn,mean_auroc,mean_tnr_at_tpr95,status\n",
        base.config_hash(),
        base.seed
    );
    let mut points = Vec::new();
    for (i, value) in grid.iter().enumerate() {
        let point_dir = out_dir.join(format!("point-{i:03}-{}", sanitize(value)));
        let outcome = run_sweep_point(base, axis, value, i, &point_dir);
        match outcome {
            Ok(report) => {
                let mut by_fn: BTreeMap<String, Vec<&PairReport>> = BTreeMap::new();
                for entry in &report.entries {
                    by_fn.entry(entry.score_fn.clone()).or_default().push(entry);
                }
                for (score_fn, entries) in by_fn {
                    let mean_auroc =
                        entries.iter().map(|e| e.auroc).sum::<f64>() / entries.len() as f64;
                    let mean_tnr = entries.iter().map(|e| e.tnr_at_tpr95).sum::<f64>()
                        / entries.len() as f64;
                    summary.push_str(&format!(
                        "{},{value},{score_fn},{mean_auroc},{mean_tnr},ok\n",
                        axis.as_str()
                    ));
                }
                points.push((value.clone(), "ok".into()));
            }
            Err(e) => {
                summary.push_str(&format!("{},{value},,,,error: {e}\n", axis.as_str()));
                points.push((value.clone(), format!("error: {e}")));
            }
        }
    }
    let summary_path = out_dir.join("summary.csv");
    write_file(&summary_path, &summary)?;
    Ok(SweepArtifacts { summary_path, points })
}

fn run_sweep_point(
    base: &ExperimentConfig,
    axis: SweepAxisKind,
    value: &str,
    index: usize,
    point_dir: &Path,
) -> Result<DetectionReport, RunError> {
    let cfg = sweep_point_config(base, axis, value, index)?;
    let artifacts = run_train(&cfg, point_dir)?;
    let eval = run_eval(&artifacts.checkpoint_path, &EvalOptions::default(), point_dir)?;
    Ok(eval.report)
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// Writes the generated benchmark as one CSV.
pub fn run_gen_data(cfg: &ExperimentConfig, out_path: &Path) -> Result<(), RunError> {
    cfg.validate()?;
    let bench = shiftbench::generate(&cfg.bench_config())?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    let body = shiftbench::to_csv(&bench);
    write_file(
        out_path,
        &format!("# config_hash={} seed={}\n{body}", cfg.config_hash(), cfg.seed),
    )
}

/// Renders a saved report as a table.
pub fn render_report(report: &DetectionReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "report seed={} config_hash={} preprocessing={}\n",
        report.seed, report.config_hash, report.preprocessing
    ));
    out.push_str(&format!(
        "{:<14} {:<18} {:>8} {:>11} {:>10}\n",
        "score_fn", "ood_set", "auroc", "tnr@tpr95", "epsilon*"
    ));
    for e in &report.entries {
        out.push_str(&format!(
            "{:<14} {:<18} {:>8.4} {:>11.4} {:>10}\n",
            e.score_fn, e.ood_set, e.auroc, e.tnr_at_tpr95, e.epsilon_star
        ));
    }
    out
}

pub fn run_report(report_path: &Path) -> Result<String, RunError> {
    let text = read_file(report_path)?;
    let report = DetectionReport::from_json(&text).map_err(RunError::Schema)?;
    Ok(render_report(&report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.bench.input_dim = 4;
        cfg.bench.id_classes = 3;
        cfg.bench.heldout_classes = 2;
        cfg.bench.train_per_class = 30;
        cfg.bench.val_per_class = 10;
        cfg.bench.ood_per_class = 10;
        cfg.bench.noise_samples = 30;
        cfg.backbone.hidden_dims = vec![8];
        cfg.train.epochs = 3;
        cfg.train.batch_size = 32;
        cfg.eval.score_fns = vec!["baseline".into(), "deconf-h".into()];
        cfg
    }

    #[test]
    fn train_writes_all_three_artifacts_and_eval_reports_all_pairs() {
        let dir = std::env::temp_dir().join(format!("odinctl-run-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = tiny_config();
        let train_dir = dir.join("train");
        let artifacts = run_train(&cfg, &train_dir).unwrap();
        assert!(artifacts.checkpoint_path.exists());
        assert!(train_dir.join("history.csv").exists());
        assert!(train_dir.join("config.snapshot.json").exists());
        assert_eq!(artifacts.history.train_loss.len(), 3);

        let eval_dir = dir.join("eval");
        let eval = run_eval(&artifacts.checkpoint_path, &EvalOptions::default(), &eval_dir).unwrap();
        // 2 score fns x 5 OoD sets
        assert_eq!(eval.report.entries.len(), 10);
        assert!(eval.report.preprocessing);
        assert!(eval_dir.join("scores_baseline.csv").exists());
        assert!(eval_dir.join("epsilon_curve_baseline.csv").exists());
        assert!(eval_dir.join("hist_baseline_ood-uniform.csv").exists());

        // Preprocessing off: epsilon* = 0 and the plain flag recorded.
        let plain_dir = dir.join("plain");
        let plain = run_eval(
            &artifacts.checkpoint_path,
            &EvalOptions { preprocess: Some(false), score_fns: None },
            &plain_dir,
        )
        .unwrap();
        assert!(!plain.report.preprocessing);
        assert!(plain.report.entries.iter().all(|e| e.epsilon_star == 0.0));
        assert!(!plain_dir.join("epsilon_curve_baseline.csv").exists());

        let rendered = run_report(&eval.report_path.clone()).unwrap();
        assert!(rendered.contains("baseline"));
        assert!(rendered.contains("ood-uniform"));

        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn checkpoint_schema_is_enforced() {
        let dir = std::env::temp_dir().join(format!("odinctl-schema-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("checkpoint.json");
        std::fs::write(&path, "{\"schema\":\"checkpoint/v9\"}").unwrap();
        assert!(matches!(CheckpointFile::load(&path), Err(RunError::Checkpoint(_))));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn sweep_point_config_varies_the_requested_axis() {
        let base = tiny_config();
        let p = sweep_point_config(&base, SweepAxisKind::NumClasses, "5", 0).unwrap();
        assert_eq!(p.bench.id_classes, 5);
        assert_ne!(p.seed, base.seed);
        let p = sweep_point_config(&base, SweepAxisKind::Dropout, "0.7", 1).unwrap();
        assert_eq!(p.backbone.head_dropout, 0.7);
        let p = sweep_point_config(&base, SweepAxisKind::HeadVariant, "PlainE", 2).unwrap();
        assert_eq!(p.head.variant, "PlainE");
        assert!(sweep_point_config(&base, SweepAxisKind::NumClasses, "x", 0).is_err());
    }
}
