//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one pass/fail line per criterion. Exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p odinctl --test acceptance` (or as part of
//! `cargo test --workspace`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odinctl::config::ExperimentConfig;
use odinctl::run::evaluate_checkpoint;
use oodkit::deconf::{HeadSpec, Similarity};
use oodkit::evalkit::{auroc, tnr_at_tpr_detail};
use oodkit::fdiff::central_gradient;
use oodkit::model::{Model, ModelSpec};
use oodkit::netcore::BackboneSpec;
use oodkit::numgrad::{Tape, Tensor};
use oodkit::perturb::{perturb, select_epsilon, EPSILON_GRID};
use oodkit::scorer::{
    build_scorer, fit_mahalanobis, score_values, BaselineScore, DeconfScore, MahalanobisScore,
    OdinScore, Score, ScoreError, ScoreKind,
};
use oodkit::shiftbench::{self, LabeledSet, SetTag};
use oodkit::trainer::{argmax, cross_entropy, train};

type Criterion = (&'static str, fn() -> Result<String, String>);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 gradient-correctness", c1_gradient_correctness),
        ("2 oracle-equivalence", c2_oracle_equivalence),
        ("3 exact-reductions", c3_exact_reductions),
        ("4 argmax-invariances", c4_argmax_invariances),
        ("5 epsilon-search-contract", c5_epsilon_search_contract),
        ("6 trend-reproduction", c6_trend_reproduction),
        ("7 overconfidence-arithmetic", c7_overconfidence_arithmetic),
        ("8 determinism", c8_determinism),
        ("9 range-invariants", c9_range_invariants),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let elapsed = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({elapsed:.1}s; {detail})"),
            Err(reason) => {
                failures += 1;
                println!("acceptance {name}: FAIL ({elapsed:.1}s; {reason})");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ── criterion 1: gradient correctness ────────────────────────────────────

fn small_spec(sim: Similarity, g_enabled: bool, use_bn: bool) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec {
            input_dim: 5,
            hidden_dims: vec![6, 4],
            use_batchnorm: use_bn,
            head_dropout: 0.0,
        },
        head: HeadSpec {
            similarity: sim,
            num_classes: 3,
            feature_dim: 4,
            g_enabled,
            g_batchnorm: true,
        },
    }
}

fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .unwrap()
}

/// Central differences are only a valid oracle where the loss is smooth on
/// the probe stencil. A batch is rejected if any hidden layer emits an
/// all-zero row (downstream pre-activations then sit exactly on their bias,
/// i.e. on the relu kink, and a zero feature row makes the cosine head
/// discontinuous) or any activation lies within the stencil of the kink.
fn fd_safe_batch(model: &Model, rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
    'resample: for _ in 0..50 {
        let x = random_batch(rows, 5, rng);
        for train_mode in [true, false] {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let out = if train_mode {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
                bound.forward_train(&mut tape, &x, &mut drop_rng)
            } else {
                bound.forward_eval(&mut tape, &x)
            };
            let Ok(out) = out else { continue 'resample };
            for feats in &out.features.per_layer {
                for r in 0..feats.rows() {
                    let row = feats.row(r);
                    if row.iter().all(|&v| v == 0.0) {
                        continue 'resample;
                    }
                    if row.iter().any(|&v| v > 0.0 && v < 1e-4) {
                        continue 'resample;
                    }
                }
            }
            let fp = &out.features.penultimate;
            for r in 0..fp.rows() {
                let norm: f64 = fp.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 0.05 {
                    continue 'resample;
                }
            }
        }
        return x;
    }
    panic!("no FD-safe batch found in 50 draws");
}

/// Train-mode cross-entropy loss of the model on a fixed batch.
fn train_loss(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout p = 0: never drawn
    let out = bound.forward_train(&mut tape, x, &mut rng).unwrap();
    let loss = cross_entropy(&mut tape, &out.head.logits, labels).unwrap();
    loss.item()
}

/// Compares reverse-mode gradients against central differences (h = 1e-5),
/// max relative error < 1e-4. A disagreeing coordinate is excluded only if
/// the one-sided slopes differ there, i.e. the loss is not differentiable at
/// the probe point (a relu/max kink inside or at the FD stencil), which makes
/// the FD oracle itself invalid. A real gradient bug shows up at smooth
/// coordinates, where the sided slopes agree, and still fails.
fn fd_check(
    reverse: &[f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    base: &[f64],
    label: &str,
    worst: &mut f64,
    kinks: &mut usize,
) -> Result<(), String> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-5;
    let fd = central_gradient(&mut *f, base, H);
    for i in 0..base.len() {
        let (a, b) = (reverse[i], fd[i]);
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(FLOOR);
        if rel < TOL {
            *worst = worst.max(rel);
            continue;
        }
        let f0 = f(base);
        let mut probe = base.to_vec();
        // Wide enough to clear the central stencil, small enough that the
        // sided slopes approximate the directional derivatives.
        let h2 = 2.0 * H;
        probe[i] = base[i] + h2;
        let s_plus = (f(&probe) - f0) / h2;
        probe[i] = base[i] - h2;
        let s_minus = (f0 - f(&probe)) / h2;
        // A derivative jump at least as large as the disagreement means the
        // discrepancy is the kink's doing, not the gradient's.
        if (s_plus - s_minus).abs() >= (a - b).abs() {
            *kinks += 1;
            continue;
        }
        return Err(format!("{label} coord {i}: reverse {a} vs fd {b} (rel {rel})"));
    }
    Ok(())
}

fn c1_gradient_correctness() -> Result<String, String> {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked_coords = 0usize;
    let mut kinks = 0usize;

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let labels = vec![seed as usize % 3, (seed as usize + 1) % 3, 2];

        // Backbone + every head variant: parameter and input gradients of the
        // train-mode cross-entropy loss.
        for sim in [Similarity::Inner, Similarity::Euclid, Similarity::Cosine] {
            for g_enabled in [false, true] {
                let spec = small_spec(sim, g_enabled, seed % 2 == 0);
                let model = Model::init(spec, 31 * seed + 7).unwrap();
                let x = fd_safe_batch(&model, 3, &mut rng);

                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let xw = tape.watch(&x);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
                let out = bound
                    .forward_train(&mut tape, &xw, &mut drop_rng)
                    .map_err(|e| e.to_string())?;
                let loss = cross_entropy(&mut tape, &out.head.logits, &labels)
                    .map_err(|e| e.to_string())?;
                let param_grads =
                    tape.grad(&loss, &bound.watched_params()).map_err(|e| e.to_string())?;
                let input_grad = tape.grad(&loss, &[&xw]).map_err(|e| e.to_string())?;

                // FD over every parameter coordinate.
                for (p_idx, grad) in param_grads.iter().enumerate() {
                    let base = model.params()[p_idx].tensor.data().to_vec();
                    let shape = model.params()[p_idx].tensor.shape().to_vec();
                    let name = model.params()[p_idx].name.clone();
                    fd_check(
                        grad.data(),
                        &mut |vals| {
                            let mut probe = model.clone();
                            *probe.params_mut()[p_idx].tensor =
                                Tensor::new(shape.clone(), vals.to_vec()).unwrap();
                            train_loss(&probe, &x, &labels)
                        },
                        &base,
                        &format!("seed {seed} {sim:?} g={g_enabled} param {name}"),
                        &mut worst,
                        &mut kinks,
                    )?;
                    checked_coords += base.len();
                }
                // FD over the input batch.
                fd_check(
                    input_grad[0].data(),
                    &mut |vals| {
                        let xt = Tensor::matrix(3, 5, vals.to_vec()).unwrap();
                        train_loss(&model, &xt, &labels)
                    },
                    x.data(),
                    &format!("seed {seed} {sim:?} g={g_enabled} input"),
                    &mut worst,
                    &mut kinks,
                )?;
                checked_coords += x.numel();
            }
        }

        // Every scoring function: input gradients of the summed batch score.
        let model = Model::init(small_spec(Similarity::Cosine, true, true), 17 * seed + 3).unwrap();
        let train_x = random_batch(24, 5, &mut rng);
        let train_y: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let maha = fit_mahalanobis(&model, &train_x, &train_y).map_err(|e| e.to_string())?;
        let xs = fd_safe_batch(&model, 2, &mut rng);
        for kind in ScoreKind::all() {
            let scorer =
                build_scorer(kind, &model, 1000.0, Some(&maha)).map_err(|e| e.to_string())?;
            let mut tape = Tape::new();
            let xw = tape.watch(&xs);
            let s = scorer.score_batch(&mut tape, &xw).map_err(|e| e.to_string())?;
            let total = tape.sum(&s).map_err(|e| e.to_string())?;
            let grad = tape.grad(&total, &[&xw]).map_err(|e| e.to_string())?;
            fd_check(
                grad[0].data(),
                &mut |vals| {
                    let xt = Tensor::matrix(2, 5, vals.to_vec()).unwrap();
                    score_values(scorer.as_ref(), &xt).unwrap().iter().sum()
                },
                xs.data(),
                &format!("seed {seed} scorer {kind}"),
                &mut worst,
                &mut kinks,
            )?;
            checked_coords += xs.numel();
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(elapsed < 30.0, format!("runtime {elapsed:.1}s exceeds 30s"))?;
    Ok(format!(
        "20 seeds, {checked_coords} coordinates, worst rel err {worst:.2e}, {kinks} kink-adjacent coords excluded"
    ))
}

// ── criterion 2: oracle equivalence ──────────────────────────────────────

fn auroc_pairwise_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                s += 1.0;
            } else if a == b {
                s += 0.5;
            }
        }
    }
    s / (id.len() * ood.len()) as f64
}

fn tnr_sweep_oracle(id: &[f64], ood: &[f64], tpr: f64) -> (f64, f64) {
    let mut candidates: Vec<f64> = id.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = f64::NEG_INFINITY;
    for &tau in &candidates {
        let frac = id.iter().filter(|&&s| s >= tau).count() as f64 / id.len() as f64;
        if frac >= tpr && tau > best {
            best = tau;
        }
    }
    let tnr = ood.iter().filter(|&&s| s < best).count() as f64 / ood.len() as f64;
    (best, tnr)
}

fn c2_oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // AUROC vs the O(n*m) pairwise oracle on 500 random instances.
    for trial in 0..500 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        // Half the trials use a coarse value grid so ties are common.
        let coarse = trial % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                (rng.random_range(0..25) as f64) * 0.4 - 5.0
            } else {
                rng.random::<f64>() * 10.0 - 5.0
            }
        };
        let id: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let fast = auroc(&id, &ood).map_err(|e| e.to_string())?;
        let slow = auroc_pairwise_oracle(&id, &ood);
        check(
            (fast - slow).abs() < 1e-12,
            format!("auroc trial {trial}: {fast} vs oracle {slow}"),
        )?;
    }

    // TNR@TPR vs the exhaustive threshold sweep, exactly.
    for trial in 0..300 {
        let n = rng.random_range(2..=120);
        let m = rng.random_range(1..=120);
        let id: Vec<f64> = (0..n).map(|_| (rng.random_range(0..30) as f64) * 0.3).collect();
        let ood: Vec<f64> = (0..m).map(|_| (rng.random_range(0..30) as f64) * 0.3).collect();
        let tpr = [0.5, 0.8, 0.9, 0.95][rng.random_range(0..4)];
        let detail = tnr_at_tpr_detail(&id, &ood, tpr).map_err(|e| e.to_string())?;
        let (tau, tnr) = tnr_sweep_oracle(&id, &ood, tpr);
        check(
            detail.threshold == tau && detail.tnr == tnr,
            format!(
                "tnr trial {trial}: ({}, {}) vs oracle ({tau}, {tnr})",
                detail.threshold, detail.tnr
            ),
        )?;
    }

    // Mahalanobis vs the explicit class x layer brute-force loop on 100
    // random small instances.
    for trial in 0..100u64 {
        let mut trng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let classes = 2 + (trial as usize % 4); // up to 5 classes
        let hidden: Vec<usize> = match trial % 3 {
            0 => vec![4],
            1 => vec![5, 3],
            _ => vec![4, 4, 3], // 3 feature taps
        };
        let input_dim = 3;
        let feature_dim = *hidden.last().unwrap();
        let spec = ModelSpec {
            backbone: BackboneSpec {
                input_dim,
                hidden_dims: hidden,
                use_batchnorm: trial % 2 == 0,
                head_dropout: 0.0,
            },
            head: HeadSpec {
                similarity: Similarity::Inner,
                num_classes: classes,
                feature_dim,
                g_enabled: false,
                g_batchnorm: false,
            },
        };
        let model = Model::init(spec, 600 + trial).unwrap();
        let n = (classes * 2).max(10).min(50);
        let train_x = random_batch(n, input_dim, &mut trng);
        let train_y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let params = fit_mahalanobis(&model, &train_x, &train_y).map_err(|e| e.to_string())?;
        let score = MahalanobisScore::new(&model, params.clone()).map_err(|e| e.to_string())?;
        let xs = random_batch(4, input_dim, &mut trng);
        let got = score_values(&score, &xs).map_err(|e| e.to_string())?;

        // Brute force on raw eval-mode features with a Gauss-Jordan inverse.
        let mut tape = Tape::new();
        let out = model
            .bind(&mut tape, false)
            .forward_eval(&mut tape, &xs)
            .map_err(|e| e.to_string())?;
        for b in 0..xs.rows() {
            let mut total = 0.0;
            for (layer, feats) in params.layers.iter().zip(&out.features.per_layer) {
                let d = layer.dim;
                let mut reg = layer.pooled_cov.clone();
                for i in 0..d {
                    reg[i * d + i] += layer.ridge;
                }
                let precision = gauss_jordan_inverse(&reg, d);
                let mut best = f64::NEG_INFINITY;
                for mean in &layer.class_means {
                    let diff: Vec<f64> = (0..d).map(|j| feats.get(b, j) - mean[j]).collect();
                    let mut quad = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            quad += diff[i] * precision[i * d + j] * diff[j];
                        }
                    }
                    best = best.max(-quad);
                }
                total += best;
            }
            // 1e-9 as a mixed tolerance: absolute near unit scale, relative for
            // large quadratic forms (two f64 routes cannot agree tighter).
            check(
                (got[b] - total).abs() < 1e-9 * total.abs().max(1.0),
                format!("maha trial {trial} sample {b}: {} vs oracle {total}", got[b]),
            )?;
        }
    }
    Ok("auroc 500 instances @1e-12, tnr 300 instances exact, maha 100 instances @1e-9".into())
}

fn gauss_jordan_inverse(a: &[f64], d: usize) -> Vec<f64> {
    let w = 2 * d;
    let mut aug = vec![0.0; d * w];
    for i in 0..d {
        for j in 0..d {
            aug[i * w + j] = a[i * d + j];
        }
        aug[i * w + d + i] = 1.0;
    }
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if aug[r * w + col].abs() > aug[pivot * w + col].abs() {
                pivot = r;
            }
        }
        for j in 0..w {
            aug.swap(col * w + j, pivot * w + j);
        }
        let p = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = aug[r * w + col];
                for j in 0..w {
                    aug[r * w + j] -= f * aug[col * w + j];
                }
            }
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            inv[i * d + j] = aug[i * w + d + j];
        }
    }
    inv
}

// ── criterion 3: exact reductions ────────────────────────────────────────

fn c3_exact_reductions() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);

    // (a) ODIN at T=1 is bit-identical to the baseline score.
    let model = Model::init(small_spec(Similarity::Cosine, true, true), 12).unwrap();
    let x = random_batch(40, 5, &mut rng);
    let base = score_values(&BaselineScore::new(&model), &x).map_err(|e| e.to_string())?;
    let odin = score_values(&OdinScore::new(&model, 1.0).map_err(|e| e.to_string())?, &x)
        .map_err(|e| e.to_string())?;
    check(base == odin, "odin(T=1) differs from baseline")?;

    // (b) PlainI with g == 1 equals a hand-rolled linear classifier, bit for
    // bit, on a zero-depth backbone.
    let c = 4;
    let spec = ModelSpec {
        backbone: BackboneSpec {
            input_dim: 6,
            hidden_dims: vec![],
            use_batchnorm: false,
            head_dropout: 0.0,
        },
        head: HeadSpec {
            similarity: Similarity::Inner,
            num_classes: c,
            feature_dim: 6,
            g_enabled: false,
            g_batchnorm: false,
        },
    };
    let model = Model::init(spec, 5).unwrap();
    let xb = random_batch(9, 6, &mut rng);
    let mut tape = Tape::new();
    let out = model
        .bind(&mut tape, false)
        .forward_eval(&mut tape, &xb)
        .map_err(|e| e.to_string())?;
    let w = &model.head.class_weights;
    let b = model.head.class_bias.as_ref().unwrap();
    for r in 0..xb.rows() {
        for class in 0..c {
            let mut dot = 0.0;
            for k in 0..6 {
                dot += w.get(class, k) * xb.get(r, k);
            }
            let expected = dot + b.data()[class];
            check(
                out.head.logits.get(r, class) == expected,
                format!("plain linear mismatch at ({r},{class})"),
            )?;
        }
    }

    // (c) eps = 0 perturbation is the identity.
    let scorer = BaselineScore::new(&model);
    let perturbed = perturb(&scorer, &xb, 0.0).map_err(|e| e.to_string())?;
    check(perturbed.data() == xb.data(), "eps=0 changed the input")?;

    Ok("odin(T=1)==baseline, PlainI==linear oracle, eps=0 identity; all bit-exact".into())
}

// ── criterion 4: argmax invariances ──────────────────────────────────────

fn c4_argmax_invariances() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let per_variant = 10_000usize;

    for sim in [Similarity::Inner, Similarity::Euclid, Similarity::Cosine] {
        for g_enabled in [false, true] {
            let spec = small_spec(sim, g_enabled, true);
            let variant_name = spec.head.variant_name();
            let model = Model::init(spec, 321).unwrap();
            let mut done = 0;
            while done < per_variant {
                let batch = (per_variant - done).min(1000);
                let x = random_batch(batch, 5, &mut rng);
                let mut tape = Tape::new();
                let out = model
                    .bind(&mut tape, false)
                    .forward_eval(&mut tape, &x)
                    .map_err(|e| e.to_string())?;
                for r in 0..batch {
                    let al = argmax(&out.head.logits.row(r));
                    let ah = argmax(&out.head.h.row(r));
                    check(
                        al == ah,
                        format!(
                            "{variant_name} sample {}: argmax logits {al} != argmax h {ah}",
                            done + r
                        ),
                    )?;
                }
                done += batch;
            }
        }
    }

    // ODIN predicted class is invariant across temperatures.
    let model = Model::init(small_spec(Similarity::Inner, true, true), 99).unwrap();
    let x = random_batch(2000, 5, &mut rng);
    let mut tape = Tape::new();
    let out = model
        .bind(&mut tape, false)
        .forward_eval(&mut tape, &x)
        .map_err(|e| e.to_string())?;
    let mut classes_by_t = Vec::new();
    for t in [1.0, 10.0, 1000.0] {
        let scaled = tape.scale(&out.head.logits, 1.0 / t).map_err(|e| e.to_string())?;
        let probs = tape.softmax(&scaled).map_err(|e| e.to_string())?;
        let classes: Vec<usize> = (0..x.rows()).map(|r| argmax(&probs.row(r))).collect();
        classes_by_t.push(classes);
    }
    check(
        classes_by_t[0] == classes_by_t[1] && classes_by_t[0] == classes_by_t[2],
        "ODIN argmax class changed with temperature",
    )?;
    Ok("6 head variants x 10^4 samples exact; ODIN class stable for T in {1,10,1000}".into())
}

// ── criterion 5: epsilon search contract ─────────────────────────────────

struct NegSqDist {
    center: Vec<f64>,
}

impl Score for NegSqDist {
    fn name(&self) -> String {
        "neg-sq-dist".into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let c = Tensor::vector(self.center.clone())?;
        let diff = tape.sub_row(x, &c)?;
        let sq = tape.mul(&diff, &diff)?;
        let ssq = tape.sum_axis1(&sq)?;
        Ok(tape.scale(&ssq, -1.0)?)
    }
}

struct ConstantScore;

impl Score for ConstantScore {
    fn name(&self) -> String {
        "constant".into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        let zeroed = tape.scale(x, 0.0)?;
        let z = tape.sum_axis1(&zeroed)?;
        Ok(tape.add_scalar(&z, 1.0)?)
    }
}

struct SumScore;

impl Score for SumScore {
    fn name(&self) -> String {
        "sum".into()
    }

    fn score_batch(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ScoreError> {
        Ok(tape.sum_axis1(x)?)
    }
}

fn c5_epsilon_search_contract() -> Result<String, String> {
    let val = |inputs: Tensor, labels: Option<Vec<usize>>| LabeledSet {
        inputs,
        labels,
        tag: SetTag::Val,
    };

    // Constant score: all grid means tie, the tie breaks to the smallest
    // epsilon, and halving returns 0.00125.
    let r =
        select_epsilon(&ConstantScore, &val(Tensor::matrix(5, 3, vec![0.1; 15]).unwrap(), None))
            .map_err(|e| e.to_string())?;
    check(r.epsilon_star == 0.00125, format!("constant: eps* {}", r.epsilon_star))?;

    // Strictly increasing mean score: argmax 0.08, eps* 0.04.
    let r = select_epsilon(
        &SumScore,
        &val(Tensor::matrix(4, 2, vec![0.3, -0.1, 0.9, 0.2, -0.4, 0.6, 0.0, 0.5]).unwrap(), None),
    )
    .map_err(|e| e.to_string())?;
    check(r.epsilon_star == 0.04, format!("increasing: eps* {}", r.epsilon_star))?;

    // Planted argmax at 0.02 -> eps* 0.01, with the objective curve matching
    // the analytic evaluation -k (a - eps)^2.
    let k = 4;
    let a = 0.02;
    let center = vec![0.25; k];
    let mut rows = Vec::new();
    for pattern in 0..8u32 {
        for (j, c) in center.iter().enumerate() {
            let sgn = if (pattern >> (j % 3)) & 1 == 0 { 1.0 } else { -1.0 };
            rows.push(c + sgn * a);
        }
    }
    let score = NegSqDist { center };
    let planted = val(Tensor::matrix(8, k, rows).unwrap(), Some(vec![0; 8]));
    let r = select_epsilon(&score, &planted).map_err(|e| e.to_string())?;
    for (i, &eps) in EPSILON_GRID.iter().enumerate() {
        let expected = -(k as f64) * (a - eps) * (a - eps);
        check(
            (r.mean_scores[i] - expected).abs() < 1e-12,
            format!("planted curve at {eps}: {} vs {expected}", r.mean_scores[i]),
        )?;
    }
    check(r.argmax_epsilon == 0.02 && r.epsilon_star == 0.01, format!("planted: {r:?}"))?;

    // Label-shuffle invariance.
    let mut shuffled = planted.clone();
    shuffled.labels = Some(vec![7, 6, 5, 4, 3, 2, 1, 0]);
    let r2 = select_epsilon(&score, &shuffled).map_err(|e| e.to_string())?;
    check(r == r2, "epsilon search depends on labels")?;

    Ok("constant->0.00125, increasing->0.04, planted->0.01, label-shuffle invariant".into())
}

// ── criterion 6: trend reproduction ──────────────────────────────────────

fn trend_experiment_config(seed: u64, variant: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.bench.input_dim = 16;
    cfg.bench.id_classes = 8;
    cfg.bench.heldout_classes = 4;
    cfg.bench.train_per_class = 200;
    cfg.bench.val_per_class = 50;
    cfg.bench.ood_per_class = 50;
    cfg.bench.noise_samples = 400;
    cfg.bench.center_radius = 3.0;
    cfg.bench.class_stddev = 1.0;
    cfg.backbone.hidden_dims = vec![64, 64];
    cfg.backbone.use_batchnorm = true;
    cfg.head.variant = variant.into();
    cfg.train.epochs = 40;
    cfg.train.batch_size = 128;
    cfg
}

fn trend_mean_auroc(seed: u64, variant: &str) -> Result<f64, String> {
    let cfg = trend_experiment_config(seed, variant);
    let bench = shiftbench::generate(&cfg.bench_config()).map_err(|e| e.to_string())?;
    let train_set = &bench.sets[&SetTag::Train];
    let val_set = &bench.sets[&SetTag::Val];
    let mut model = Model::init(cfg.model_spec().map_err(|e| e.to_string())?, cfg.seed)
        .map_err(|e| e.to_string())?;
    train(
        &mut model,
        &train_set.inputs,
        train_set.labels.as_ref().unwrap(),
        &val_set.inputs,
        val_set.labels.as_ref().unwrap(),
        &cfg.train_config(),
    )
    .map_err(|e| e.to_string())?;
    let (kinds, preprocess) = if variant == "PlainI" {
        (vec![ScoreKind::Baseline], false) // Baseline without preprocessing
    } else {
        (vec![ScoreKind::DeconfH], true) // DeConf-C* = h branch + preprocessing
    };
    let report =
        evaluate_checkpoint(&model, &bench, &cfg, &kinds, preprocess, &std::env::temp_dir(), false)
            .map_err(|e| e.to_string())?;
    let sets = ["ood-semantic", "ood-nonsemantic", "ood-uniform", "ood-gaussian"];
    let mut sum = 0.0;
    for name in sets {
        let entry = report
            .entries
            .iter()
            .find(|e| e.ood_set == name)
            .ok_or_else(|| format!("missing OoD set {name}"))?;
        sum += entry.auroc;
    }
    Ok(sum / sets.len() as f64)
}

fn c6_trend_reproduction() -> Result<String, String> {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let baseline = trend_mean_auroc(seed, "PlainI")?;
        let deconf = trend_mean_auroc(seed, "C")?;
        let win = deconf > baseline;
        wins += win as u32;
        detail.push_str(&format!("s{seed}:{deconf:.3}v{baseline:.3} "));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    check(elapsed < 300.0, format!("runtime {elapsed:.0}s exceeds 5 min"))?;
    check(wins >= 4, format!("DeConf-C* beat Baseline in only {wins}/5 seeds ({detail})"))?;
    Ok(format!("{wins}/5 seeds win, deconf-c* vs baseline mean AUROC: {}", detail.trim_end()))
}

// ── criterion 7: overconfidence arithmetic ───────────────────────────────

fn c7_overconfidence_arithmetic() -> Result<String, String> {
    // The joint/domain decomposition p(y|d_in,x) = p(y,d_in|x) / p(d_in|x):
    // a low joint over a low domain probability yields a high conditional.
    let joint = 0.09_f64;
    let domain = 0.1_f64;
    check((joint / domain - 0.9).abs() < 1e-15, "0.09/0.1 != 0.9")?;
    for &(cond, dom) in &[(0.3_f64, 0.5_f64), (0.9, 0.1), (0.99, 0.77), (0.05, 0.06)] {
        let j = cond * dom;
        check(
            (j / dom - cond).abs() < 1e-12,
            format!("decomposition identity failed at ({cond},{dom})"),
        )?;
    }
    Ok("0.09/0.1 = 0.9; decomposition identity holds on synthetic triples".into())
}

// ── criterion 8: determinism through the CLI ─────────────────────────────

const DET_CONFIG: &str = r#"
seed = 21
[bench]
input_dim = 4
id_classes = 3
heldout_classes = 2
train_per_class = 40
val_per_class = 12
ood_per_class = 12
noise_samples = 36
[backbone]
hidden_dims = [10]
[head]
variant = "C"
[train]
epochs = 4
batch_size = 32
[eval]
score_fns = ["baseline", "odin", "mahalanobis", "deconf-h", "deconf-g"]
"#;

fn c8_determinism() -> Result<String, String> {
    let base = std::env::temp_dir().join(format!("odinctl-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    let config = base.join("exp.toml");
    std::fs::write(&config, DET_CONFIG).map_err(|e| e.to_string())?;

    let run_cli = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_odinctl"))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "odinctl {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(())
    };
    let path = |p: &PathBuf| p.to_str().unwrap().to_string();

    let (t1, t2) = (base.join("train1"), base.join("train2"));
    run_cli(&["train", "--config", &path(&config), "--out", &path(&t1)])?;
    run_cli(&["train", "--config", &path(&config), "--out", &path(&t2)])?;
    let c1 = std::fs::read(t1.join("checkpoint.json")).map_err(|e| e.to_string())?;
    let c2 = std::fs::read(t2.join("checkpoint.json")).map_err(|e| e.to_string())?;
    check(c1 == c2, "checkpoints differ between identical train runs")?;
    let h1 = std::fs::read(t1.join("history.csv")).map_err(|e| e.to_string())?;
    let h2 = std::fs::read(t2.join("history.csv")).map_err(|e| e.to_string())?;
    check(h1 == h2, "history CSVs differ between identical train runs")?;

    let (e1, e2) = (base.join("eval1"), base.join("eval2"));
    let ckpt = path(&t1.join("checkpoint.json"));
    run_cli(&["eval", "--checkpoint", &ckpt, "--out", &path(&e1)])?;
    run_cli(&["eval", "--checkpoint", &ckpt, "--out", &path(&e2)])?;
    let r1 = std::fs::read(e1.join("report.json")).map_err(|e| e.to_string())?;
    let r2 = std::fs::read(e2.join("report.json")).map_err(|e| e.to_string())?;
    check(r1 == r2, "reports differ between identical eval replays")?;

    let bytes = c1.len() + r1.len();
    let _ = std::fs::remove_dir_all(&base);
    Ok(format!("checkpoint + report byte-identical across replays ({bytes} bytes compared)"))
}

// ── criterion 9: range invariants on an instrumented run ─────────────────

fn c9_range_invariants() -> Result<String, String> {
    // Train one model per distance-based head so h^E and h^C ranges are both
    // exercised end to end, then run full evaluations and inspect every
    // branch output on every (perturbed) set.
    let mut checked = 0usize;
    for variant in ["E", "C"] {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 17;
        cfg.bench.input_dim = 6;
        cfg.bench.id_classes = 4;
        cfg.bench.heldout_classes = 2;
        cfg.bench.train_per_class = 50;
        cfg.bench.val_per_class = 20;
        cfg.bench.ood_per_class = 20;
        cfg.bench.noise_samples = 60;
        cfg.backbone.hidden_dims = vec![12, 8];
        cfg.head.variant = variant.into();
        cfg.train.epochs = 10;
        cfg.train.batch_size = 64;

        let bench = shiftbench::generate(&cfg.bench_config()).map_err(|e| e.to_string())?;
        let train_set = &bench.sets[&SetTag::Train];
        let val_set = &bench.sets[&SetTag::Val];
        let mut model = Model::init(cfg.model_spec().map_err(|e| e.to_string())?, cfg.seed)
            .map_err(|e| e.to_string())?;
        train(
            &mut model,
            &train_set.inputs,
            train_set.labels.as_ref().unwrap(),
            &val_set.inputs,
            val_set.labels.as_ref().unwrap(),
            &cfg.train_config(),
        )
        .map_err(|e| e.to_string())?;

        // Full evaluation with every scorer; metrics must stay in [0,1] and
        // the retained ID fraction at or above the target.
        let kinds = ScoreKind::all().to_vec();
        let report =
            evaluate_checkpoint(&model, &bench, &cfg, &kinds, true, &std::env::temp_dir(), false)
                .map_err(|e| e.to_string())?;
        check(
            report.entries.len() == 25,
            format!("expected 25 entries, got {}", report.entries.len()),
        )?;
        for e in &report.entries {
            check(
                (0.0..=1.0).contains(&e.auroc) && (0.0..=1.0).contains(&e.tnr_at_tpr95),
                format!("{} vs {}: metric out of range", e.score_fn, e.ood_set),
            )?;
            check(e.achieved_tpr >= 0.95, format!("achieved TPR {} < 0.95", e.achieved_tpr))?;
        }

        // Branch ranges across every set, perturbed at the h-branch eps*.
        let h_scorer = DeconfScore::h_branch(&model);
        let eps = select_epsilon(&h_scorer, val_set).map_err(|e| e.to_string())?.epsilon_star;
        let maha = fit_mahalanobis(&model, &train_set.inputs, train_set.labels.as_ref().unwrap())
            .map_err(|e| e.to_string())?;
        let maha_scorer = MahalanobisScore::new(&model, maha).map_err(|e| e.to_string())?;
        for set in bench.sets.values() {
            let inputs = perturb(&h_scorer, &set.inputs, eps).map_err(|e| e.to_string())?;
            let mut tape = Tape::new();
            let out = model
                .bind(&mut tape, false)
                .forward_eval(&mut tape, &inputs)
                .map_err(|e| e.to_string())?;
            for &v in out.head.h.data() {
                match variant {
                    "E" => check(v <= 0.0, format!("h^E value {v} > 0 on {}", set.tag))?,
                    _ => check(
                        (-1.0..=1.0).contains(&v),
                        format!("h^C value {v} outside [-1,1] on {}", set.tag),
                    )?,
                }
            }
            let g = out.head.g.as_ref().ok_or("missing divisor output")?;
            for &v in g.data() {
                check(v > 0.0 && v < 1.0, format!("g value {v} outside (0,1) on {}", set.tag))?;
            }
            for layer in oodkit::scorer::mahalanobis_layer_scores(&maha_scorer, &inputs)
                .map_err(|e| e.to_string())?
            {
                for &v in &layer {
                    check(v <= 0.0, format!("maha layer score {v} > 0 on {}", set.tag))?;
                }
            }
            checked += out.head.h.numel() + g.numel();
        }
    }
    Ok(format!("h/g/maha ranges and metric bounds hold ({checked} branch values inspected)"))
}
