//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! Run a subset with `cargo test --test acceptance -- 3 4 7`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use reprogram_core::backbone::{ToyBackbone, ToyBackboneSpec};
use reprogram_core::config::{DataSource, ExperimentConfig};
use reprogram_core::dataio::label_stats;
use reprogram_core::datamodel::{LabelState, Spectrogram, SplitTag, TriStateLabelVector, Vocabulary};
use reprogram_core::evaluation::{budget_report, macro_f1};
use reprogram_core::experiment::{self, build_backbone, build_dataset, run_seeds};
use reprogram_core::mapping::{fcl_forward, fcl_gradient, FclMapper, MapperKind};
use reprogram_core::reprogrammers::{Mode, Reprogrammer, ReprogrammerKind, ReprogrammerSpec};
use reprogram_core::rng::Lcg64;
use reprogram_core::training::{self, evaluate_split, lr_at_epoch, partial_bce, Model, TrainingPlan};

/// Criteria expected to fail, with the reason. A listed criterion that
/// passes is reported as an error so this list cannot go stale.
const KNOWN_FAILURES: [(u32, &str); 1] = [(
    6,
    "CNN + 527->20 FCL totals 10,865 with C_h = 16, 36% below the 0.017M reference",
)];

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-6;
const FD_ABS_FLOOR: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_FIXTURES: usize = 1000;
const FROZEN_RUN_LIMIT: Duration = Duration::from_secs(10 * 60);
const ORDERING_RUN_LIMIT: Duration = Duration::from_secs(30 * 60);
const UNET_MIN_F1: f64 = 0.90;
const MIN_ORDER_GAP: f64 = 0.02;
/// Largest accepted distance between IDENTITY and the uninformed baseline.
const NEAR_BASELINE_TOL: f64 = 0.05;
const OPENMIC_RECORDS: usize = 20_000;
const OPENMIC_OBSERVED: usize = 41_268;
const OPENMIC_MISSING: f64 = 0.897;
const OPENMIC_MISSING_TOL: f64 = 0.005;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

/// Relative error, or zero when both values agree to within `FD_ABS_FLOOR`
/// (parameters whose true gradient is zero, such as conv biases feeding a
/// batch-norm in training mode).
fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= FD_ABS_FLOOR {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

fn random_spec(t: usize, f: usize, rng: &mut Lcg64) -> Spectrogram {
    Spectrogram::new((0..t * f).map(|_| rng.normal()).collect(), t, f, 10.0).unwrap()
}

fn random_labels(c: usize, missing: f64, rng: &mut Lcg64) -> TriStateLabelVector {
    TriStateLabelVector::new(
        (0..c)
            .map(|_| {
                if rng.bernoulli(missing) {
                    LabelState::Missing
                } else if rng.bernoulli(0.5) {
                    LabelState::Positive
                } else {
                    LabelState::Negative
                }
            })
            .collect(),
    )
}

fn synthetic_config(preset: &str, overrides: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(preset).unwrap();
    for o in overrides {
        cfg.apply_override(o).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

// 1. The backbone is bit-identical after a full-length run.
fn frozen_backbone() -> Verdict {
    let cfg = synthetic_config(
        "synth_unet",
        &[
            "synthetic.n_clips=200",
            "frontend.target_frames=32",
            "frontend.n_mels=32",
            "synthetic.blob_frames=4",
            "synthetic.blob_bins=4",
            "train.epochs=50",
            "repeats=1",
        ],
    );
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let before = build_backbone(&cfg).unwrap().fingerprint();
    experiment::train_run(&cfg, &tmp.path().join("run")).unwrap();
    let ckpt = reprogram_core::checkpoint::Checkpoint::load(
        &experiment::seed_dir(&tmp.path().join("run"), cfg.seed).join(experiment::CHECKPOINT_FILE),
    )
    .unwrap();
    let after = build_backbone(&cfg).unwrap().fingerprint();
    let elapsed = start.elapsed();
    check(
        before == after && ckpt.fingerprint == before && elapsed < FROZEN_RUN_LIMIT,
        format!(
            "50 epochs in {:.0?}, fingerprint {} before, {} after, {} in checkpoint",
            elapsed,
            &before.to_hex()[..12],
            &after.to_hex()[..12],
            &ckpt.fingerprint.to_hex()[..12]
        ),
    )
}

fn worst_reprogrammer_fd(spec: &ReprogrammerSpec, batch: usize, mode: Mode, seed: u64) -> f64 {
    let mut rng = Lcg64::new(seed);
    let mut r = Reprogrammer::init(spec, seed).unwrap();
    // Non-zero noise and perturbed batch-norm state so no gradient is
    // trivially zero.
    for p in r.params_mut() {
        for v in p.data.iter_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    for b in r.buffers_mut() {
        for v in b.data.iter_mut() {
            *v = if b.name.ends_with("running_var") {
                0.5 + rng.next_f64()
            } else {
                0.2 * rng.normal()
            };
        }
    }
    let (t, f) = spec.dims;
    let xs: Vec<Spectrogram> = (0..batch).map(|_| random_spec(t, f, &mut rng)).collect();
    let ups: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..t * f).map(|_| rng.normal()).collect())
        .collect();
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let objective = |r: &Reprogrammer| -> f64 {
        let (outs, _) = r.forward_batch(&refs, mode).unwrap();
        outs.iter()
            .zip(&ups)
            .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let (_, cache) = r.forward_batch(&refs, mode).unwrap();
    let grads = r.backward_batch(&cache, &ups).unwrap();
    let mut worst = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            let orig = r.params()[pi].data[j];
            r.params_mut()[pi].data[j] = orig + FD_STEP;
            let up = objective(&r);
            r.params_mut()[pi].data[j] = orig - FD_STEP;
            let dn = objective(&r);
            r.params_mut()[pi].data[j] = orig;
            worst = worst.max(rel_err(*gj, (up - dn) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn worst_fcl_fd(seed: u64) -> f64 {
    let mut rng = Lcg64::new(seed);
    let (k, c) = (12, 5);
    let mut m = FclMapper::init(k, c, seed);
    for b in m.bias.data.iter_mut() {
        *b = 0.3 * rng.normal();
    }
    let s: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let up: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let objective = |m: &FclMapper| -> f64 {
        fcl_forward(&s, m)
            .unwrap()
            .iter()
            .zip(&up)
            .map(|(p, u)| p * u)
            .sum()
    };
    let g = fcl_gradient(&s, &m, &up).unwrap();
    let mut worst = 0.0f64;
    for (block, analytic) in [(0, &g.weight), (1, &g.bias)] {
        for (j, a) in analytic.iter().enumerate() {
            let (mut plus, mut minus) = (m.clone(), m.clone());
            let (p, n) = if block == 0 {
                (&mut plus.weight.data[j], &mut minus.weight.data[j])
            } else {
                (&mut plus.bias.data[j], &mut minus.bias.data[j])
            };
            *p += FD_STEP;
            *n -= FD_STEP;
            worst = worst.max(rel_err(
                *a,
                (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP),
            ));
        }
    }
    worst
}

// 2. Analytic gradients of every trainable block against central differences.
fn gradients() -> Verdict {
    let noise = ReprogrammerSpec::new(ReprogrammerKind::Noise, (6, 5));
    let mut cnn = ReprogrammerSpec::new(ReprogrammerKind::Cnn, (7, 6));
    cnn.cnn_hidden = 3;
    let mut unet_train = ReprogrammerSpec::new(ReprogrammerKind::Unet, (8, 8));
    unet_train.unet_widths = [2, 3, 4];
    let mut unet_eval = ReprogrammerSpec::new(ReprogrammerKind::Unet, (8, 16));
    unet_eval.unet_widths = [2, 2, 3];
    let rows = [
        ("noise", worst_reprogrammer_fd(&noise, 2, Mode::Train, 11)),
        ("cnn", worst_reprogrammer_fd(&cnn, 2, Mode::Train, 12)),
        (
            "unet/train",
            worst_reprogrammer_fd(&unet_train, 3, Mode::Train, 3),
        ),
        ("unet/eval", worst_reprogrammer_fd(&unet_eval, 2, Mode::Eval, 4)),
        ("fcl", worst_fcl_fd(15)),
    ];
    let detail = rows
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        rows.iter().all(|(_, e)| *e < FD_REL_TOL),
        format!("worst relative error {detail} (tol {FD_REL_TOL:e}, differences under {FD_ABS_FLOOR:e} count as 0)"),
    )
}

fn bce_oracle(pred: &[f64], labels: &TriStateLabelVector) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..labels.len() {
        let y = match labels.get(c) {
            LabelState::Positive => 1.0,
            LabelState::Negative => 0.0,
            LabelState::Missing => continue,
        };
        let p = pred[c].clamp(training::PRED_CLAMP, 1.0 - training::PRED_CLAMP);
        sum += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// 3. Masked BCE against an element loop.
fn loss_oracle() -> Verdict {
    let mut rng = Lcg64::new(3);
    let mut worst = 0.0f64;
    let (mut all_missing_ok, mut full_ok) = (true, true);
    for i in 0..ORACLE_FIXTURES {
        let c = 1 + rng.below(20);
        let missing = match i % 4 {
            0 => 1.0,
            1 => 0.0,
            _ => rng.next_f64(),
        };
        let labels = random_labels(c, missing, &mut rng);
        let pred: Vec<f64> = (0..c).map(|_| rng.next_f64()).collect();
        let got = partial_bce(&pred, &labels).unwrap();
        worst = worst.max((got - bce_oracle(&pred, &labels)).abs());
        if labels.observed_count() == 0 {
            all_missing_ok &= got == 0.0;
        }
        if labels.observed_count() == c {
            let plain: f64 = (0..c)
                .map(|k| {
                    let y = f64::from(u8::from(labels.get(k) == LabelState::Positive));
                    -(y * pred[k].ln() + (1.0 - y) * (1.0 - pred[k]).ln())
                })
                .sum::<f64>()
                / c as f64;
            full_ok &= (got - plain).abs() <= ORACLE_TOL * plain.abs().max(1.0);
        }
    }
    check(
        worst <= ORACLE_TOL && all_missing_ok && full_ok,
        format!(
            "{ORACLE_FIXTURES} fixtures, max abs diff {worst:.1e}, all-missing zero {all_missing_ok}, no-missing mean BCE {full_ok}"
        ),
    )
}

fn f1_oracle(preds: &[Vec<u8>], labels: &[TriStateLabelVector], c_n: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..c_n {
        let mut confusion = [[0usize; 2]; 2];
        for (p, l) in preds.iter().zip(labels) {
            let truth = match l.get(c) {
                LabelState::Positive => 1,
                LabelState::Negative => 0,
                LabelState::Missing => continue,
            };
            confusion[truth][usize::from(p[c])] += 1;
        }
        let (tp, fp, fn_) = (confusion[1][1], confusion[0][1], confusion[1][0]);
        total += if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
    }
    total / c_n as f64
}

// 4. Macro-F1 against a confusion-matrix oracle.
fn metric_oracle() -> Verdict {
    let mut rng = Lcg64::new(4);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_FIXTURES {
        let c_n = 1 + rng.below(8);
        let n = 1 + rng.below(40);
        let missing = 0.9 * rng.next_f64();
        let labels: Vec<TriStateLabelVector> =
            (0..n).map(|_| random_labels(c_n, missing, &mut rng)).collect();
        let preds: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..c_n).map(|_| u8::from(rng.bernoulli(0.5))).collect())
            .collect();
        let got = macro_f1(&preds, &labels).unwrap().macro_f1;
        worst = worst.max((got - f1_oracle(&preds, &labels, c_n)).abs());
    }
    // A class with no positives and no predicted positives scores 0 and
    // still counts in the mean.
    use LabelState::{Negative, Positive};
    let labels = vec![
        TriStateLabelVector::new(vec![Positive, Negative]),
        TriStateLabelVector::new(vec![Negative, Negative]),
    ];
    let degenerate = macro_f1(&[vec![1, 0], vec![0, 0]], &labels).unwrap();
    let degenerate_ok = degenerate.per_class[1].f1 == 0.0 && degenerate.macro_f1 == 0.5;
    check(
        worst <= ORACLE_TOL && degenerate_ok,
        format!(
            "{ORACLE_FIXTURES} fixtures, max abs diff {worst:.1e}, degenerate class F1 = 0: {degenerate_ok}"
        ),
    )
}

// 5. The step-halving schedule, exactly.
fn schedule() -> Verdict {
    let plan = TrainingPlan::default();
    let mut mismatches = Vec::new();
    for e in 1..=50 {
        let expected = if e <= 10 {
            5e-5
        } else {
            5e-5 / f64::from(1u32 << ((e - 11) / 5 + 1))
        };
        let got = lr_at_epoch(e, &plan).unwrap();
        if got != expected {
            mismatches.push(format!("epoch {e}: {got:e} != {expected:e}"));
        }
    }
    let last = lr_at_epoch(50, &plan).unwrap();
    check(
        mismatches.is_empty() && last == 1.953125e-7,
        format!(
            "epochs 1-50 exact, epoch 50 = {last:e}; mismatches: {}",
            mismatches.len()
        ),
    )
}

// 6. Trainable-parameter budgets at the AST shape.
fn budgets() -> Verdict {
    let dims = (1024, 128);
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [
        ReprogrammerKind::Noise,
        ReprogrammerKind::Cnn,
        ReprogrammerKind::Unet,
    ] {
        let spec = ReprogrammerSpec::new(kind, dims);
        let r = budget_report(&spec, MapperKind::Fcl, 527, 20);
        if kind == ReprogrammerKind::Noise && r.total != 141_632 {
            ok = false;
        }
        ok &= r.within_tolerance();
        lines.push(format!(
            "{} {} vs {:.0} ({:+.1}%)",
            r.reference_system,
            r.total,
            r.reference,
            100.0 * r.deviation()
        ));
    }
    check(ok, lines.join(", "))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// 7. Qualitative ordering on the planted-pattern task.
fn ordering() -> Verdict {
    let start = Instant::now();
    let presets = ["synth_identity", "synth_noise", "synth_cnn", "synth_unet"];
    let configs: Vec<ExperimentConfig> = presets.iter().map(|p| synthetic_config(p, &[])).collect();
    let base = &configs[0];
    for c in &configs[1..] {
        assert_eq!(c.synthetic, base.synthetic, "presets must share the dataset");
        assert_eq!(c.backbone, base.backbone, "presets must share the backbone");
        assert_eq!(c.train, base.train, "presets must share the training plan");
    }
    let backbone = build_backbone(base).unwrap();
    let dataset = build_dataset(base).unwrap();

    let mut means = Vec::new();
    for cfg in &configs {
        let scores: Vec<f64> = run_seeds(cfg)
            .into_iter()
            .map(|seed| {
                training::fit(cfg, &dataset, backbone.as_ref(), seed)
                    .unwrap()
                    .test_macro_f1()
                    .unwrap()
            })
            .collect();
        means.push(mean(&scores));
    }
    let elapsed = start.elapsed();

    // Uninformed reference: the macro-F1 of marking every observed test
    // label positive, which is what an untrained mapper converges to when
    // its constant output lands above the threshold.
    let test_labels: Vec<TriStateLabelVector> = dataset
        .indices(SplitTag::Test)
        .iter()
        .map(|&i| dataset.records[i].labels.clone())
        .collect();
    let all_positive = vec![vec![1u8; dataset.vocab.size()]; test_labels.len()];
    let constant = macro_f1(&all_positive, &test_labels).unwrap().macro_f1;
    let untrained = mean(
        &run_seeds(base)
            .into_iter()
            .map(|seed| {
                let m = Model::build(base, &dataset.vocab, backbone.k_src(), seed).unwrap();
                evaluate_split(
                    &m,
                    backbone.as_ref(),
                    &dataset,
                    SplitTag::Test,
                    base.eval_threshold,
                )
                .unwrap()
                .macro_f1
            })
            .collect::<Vec<_>>(),
    );

    let (id, noise, cnn, unet) = (means[0], means[1], means[2], means[3]);
    let ok = unet >= UNET_MIN_F1
        && unet - cnn >= MIN_ORDER_GAP
        && cnn - noise >= MIN_ORDER_GAP
        && noise - id >= MIN_ORDER_GAP
        && (id - constant).abs() <= NEAR_BASELINE_TOL
        && elapsed < ORDERING_RUN_LIMIT;
    check(
        ok,
        format!(
            "identity {id:.4}, noise {noise:.4}, cnn {cnn:.4}, unet {unet:.4}; gaps {:+.4} {:+.4} {:+.4}; \
             all-positive baseline {constant:.4} (untrained init {untrained:.4}); {:.0?}",
            noise - id,
            cnn - noise,
            unet - cnn,
            elapsed
        ),
    )
}

// 8. Zero noise and the same mapper initialization reproduce the baseline.
fn baseline_equivalence() -> Verdict {
    let mut compared = 0;
    let mut equal = true;
    for (dims, seed) in [((128, 128), 1u64), ((32, 48), 2), ((1024, 128), 3)] {
        let mut cfg = ExperimentConfig::default();
        cfg.frontend.target_frames = dims.0;
        cfg.frontend.n_mels = dims.1;
        cfg.reprogrammer.dims = dims;
        let backbone = ToyBackbone::new(ToyBackboneSpec::new(seed, dims, 527)).unwrap();
        let vocab = Vocabulary::openmic();
        cfg.reprogrammer.kind = ReprogrammerKind::Identity;
        let identity = Model::build(&cfg, &vocab, 527, seed).unwrap();
        cfg.reprogrammer.kind = ReprogrammerKind::Noise;
        let noise = Model::build(&cfg, &vocab, 527, seed).unwrap();
        let mut rng = Lcg64::new(seed);
        for _ in 0..3 {
            let x = random_spec(dims.0, dims.1, &mut rng);
            equal &= identity.predict(&backbone, &x).unwrap() == noise.predict(&backbone, &x).unwrap();
            compared += 1;
        }
    }
    check(
        equal,
        format!("{compared} random inputs, predictions bitwise equal: {equal}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

// 9. Identical configuration and seed give byte-identical outputs.
fn determinism() -> Verdict {
    let cfg = synthetic_config(
        "synth_unet",
        &[
            "synthetic.n_clips=120",
            "frontend.target_frames=32",
            "frontend.n_mels=32",
            "synthetic.blob_frames=4",
            "synthetic.blob_bins=4",
            "train.epochs=4",
            "train.warm_epochs=2",
            "train.halve_every=1",
            "repeats=2",
        ],
    );
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    experiment::train_run(&cfg, &a).unwrap();
    experiment::train_run(&cfg, &b).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect()
    };
    let same_layout = rel(&a, &fa) == rel(&b, &fb);
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| fs::read(x).unwrap() != fs::read(y).unwrap())
        .map(|(x, _)| x.strip_prefix(&a).unwrap().display().to_string())
        .collect();
    check(
        same_layout && differing.is_empty() && !fa.is_empty(),
        format!("{} files compared, differing: {differing:?}", fa.len()),
    )
}

// 10. Released OpenMIC label statistics; needs the dataset on disk.
fn openmic_statistics() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_env();
    if cfg.data.source != DataSource::OpenMic || !Path::new(&cfg.data.root).is_dir() {
        return Verdict::Skip(format!("dataset not found at {}", cfg.data.root));
    }
    let (_, records) = match experiment::load_records(&cfg) {
        Ok(r) => r,
        Err(e) => return Verdict::Skip(format!("dataset unreadable: {e}")),
    };
    let s = label_stats(&records).unwrap();
    let min_pos = s.per_class.iter().map(|c| c.positives).min().unwrap_or(0);
    let min_obs = s
        .per_class
        .iter()
        .map(|c| c.positives + c.negatives)
        .min()
        .unwrap_or(0);
    check(
        s.n_records == OPENMIC_RECORDS
            && s.observed() == OPENMIC_OBSERVED
            && (s.missing_fraction() - OPENMIC_MISSING).abs() <= OPENMIC_MISSING_TOL
            && min_pos >= 500
            && min_obs >= 1500,
        format!(
            "{} records, {} observed, {:.2}% missing, min positives {min_pos}, min observed {min_obs}",
            s.n_records,
            s.observed(),
            100.0 * s.missing_fraction()
        ),
    )
}

// 11. The full-scale procedure is documented; it is never run here.
fn full_scale_documented() -> Verdict {
    let readme = include_str!("../../../README.md");
    let documented = readme.contains("## Full-scale procedure") && readme.contains("--config ast_unet");
    if documented {
        Verdict::Skip("documented in README (non-gating; needs external weights and OpenMIC)".into())
    } else {
        Verdict::Fail("README lacks the full-scale procedure".into())
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 11] = [
        (1, "frozen backbone", frozen_backbone),
        (2, "gradient correctness", gradients),
        (3, "loss oracle", loss_oracle),
        (4, "metric oracle", metric_oracle),
        (5, "learning-rate schedule", schedule),
        (6, "parameter budgets", budgets),
        (7, "synthetic ordering", ordering),
        (8, "baseline equivalence", baseline_equivalence),
        (9, "determinism", determinism),
        (10, "OpenMIC statistics", openmic_statistics),
        (11, "full-scale procedure", full_scale_documented),
    ];
    let mut unexpected = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == n).map(|(_, why)| *why);
        let line = match (run(), known) {
            (Verdict::Pass(d), None) => format!("PASS  {d}"),
            (Verdict::Pass(d), Some(_)) => {
                unexpected += 1;
                format!("PASS  {d} [listed as a known failure; update KNOWN_FAILURES]")
            }
            (Verdict::Fail(d), Some(why)) => format!("FAIL  {d} [known: {why}]"),
            (Verdict::Fail(d), None) => {
                unexpected += 1;
                format!("FAIL  {d}")
            }
            (Verdict::Skip(d), _) => format!("SKIP  {d}"),
        };
        println!("criterion {n:>2} ({name}): {line}");
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected result(s)");
        ExitCode::FAILURE
    }
}
