use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use odinctl::config::ExperimentConfig;
use odinctl::run::{
    fresh_run_dir, run_eval, run_gen_data, run_report, run_sweep, run_train, EvalOptions,
    SweepAxisKind,
};
use oodkit::scorer::ScoreKind;

/// Train, evaluate, and sweep OoD detection experiments on synthetic
/// distribution-shift benchmarks.
#[derive(Parser)]
#[command(name = "odinctl", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate data per the config, train a classifier, write the checkpoint.
    Train {
        /// Config file (TOML; JSON also accepted).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: a fresh runs/train-<ts> directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against every OoD set and write the report.
    Eval {
        /// Path to a checkpoint.json produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (default: a fresh runs/eval-<ts> directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Force input preprocessing on/off (default: config setting).
        #[arg(long)]
        preprocess: Option<bool>,
        /// Comma-separated score functions
        /// (baseline,odin,mahalanobis,deconf-h,deconf-g).
        #[arg(long, value_delimiter = ',')]
        score_fns: Option<Vec<String>>,
    },
    /// Train+eval across a grid and aggregate one summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: num_samples, num_classes, head_variant, dropout.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values for the chosen axis.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark and write it as one CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a saved report.json as a table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = match out {
                Some(dir) => dir,
                None => fresh_run_dir(&PathBuf::from("runs"), "train")?,
            };
            let artifacts = run_train(&cfg, &out_dir)?;
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
            if let Some(acc) = artifacts.history.val_acc.last() {
                println!("final val accuracy: {acc:.4}");
            }
            Ok(())
        }
        Cmd::Eval { checkpoint, out, preprocess, score_fns } => {
            let score_fns = match score_fns {
                None => None,
                Some(names) => {
                    let mut kinds = Vec::new();
                    for name in names {
                        let kind = ScoreKind::parse(&name)
                            .ok_or_else(|| format!("unknown score fn '{name}'"))?;
                        if !kinds.contains(&kind) {
                            kinds.push(kind);
                        }
                    }
                    Some(kinds)
                }
            };
            let out_dir = match out {
                Some(dir) => dir,
                None => fresh_run_dir(&PathBuf::from("runs"), "eval")?,
            };
            let artifacts =
                run_eval(&checkpoint, &EvalOptions { preprocess, score_fns }, &out_dir)?;
            println!("report: {}", artifacts.report_path.display());
            print!("{}", odinctl::run::render_report(&artifacts.report));
            Ok(())
        }
        Cmd::Sweep { config, axis, grid, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let axis = SweepAxisKind::parse(&axis).ok_or_else(|| {
                format!("unknown axis '{axis}' (num_samples|num_classes|head_variant|dropout)")
            })?;
            let out_dir = match out {
                Some(dir) => dir,
                None => fresh_run_dir(&PathBuf::from("runs"), "sweep")?,
            };
            let artifacts = run_sweep(&cfg, axis, &grid, &out_dir)?;
            println!("summary: {}", artifacts.summary_path.display());
            for (value, status) in &artifacts.points {
                println!("point {value}: {status}");
            }
            Ok(())
        }
        Cmd::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            run_gen_data(&cfg, &out)?;
            println!("dataset: {}", out.display());
            Ok(())
        }
        Cmd::Report { report } => {
            print!("{}", run_report(&report)?);
            Ok(())
        }
    }
}
