//! Masked-BCE optimization of the reprogrammer and mapper around a frozen
//! backbone, with the step-halving learning-rate plan and best-validation
//! checkpoint selection.

use std::fmt::Write as _;

use crate::backbone::{Fingerprint, FrozenBackbone};
use crate::checkpoint::{restore_blocks, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataio::Dataset;
use crate::datamodel::{LabelState, Spectrogram, SplitTag, TriStateLabelVector, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{binarize, macro_f1, EvalReport, F1Breakdown};
use crate::mapping::{FclMapper, LabelMapper, ManyToOneAssignment, MapperKind};
use crate::nn::Param;
use crate::optim::Adam;
use crate::reprogrammers::{Mode, Reprogrammer};
use crate::rng::Lcg64;

/// Predictions are clamped this far from 0 and 1 before taking logs.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub batch_size: usize,
    pub total_epochs: usize,
    pub lr0: f64,
    /// Epochs at `lr0` before halving starts.
    pub warm_epochs: usize,
    pub halve_every: usize,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_epochs: 50,
            lr0: 5e-5,
            warm_epochs: 10,
            halve_every: 5,
        }
    }
}

/// `lr0` through `warm_epochs`, then halved at the start of every block of
/// `halve_every` epochs (first halving at epoch `warm_epochs + 1`).
pub fn lr_at_epoch(e: usize, plan: &TrainingPlan) -> Result<f64> {
    if e == 0 || e > plan.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch: e,
            total: plan.total_epochs,
        });
    }
    if e <= plan.warm_epochs {
        return Ok(plan.lr0);
    }
    let halvings = (e - plan.warm_epochs).div_ceil(plan.halve_every.max(1));
    Ok(plan.lr0 / 2f64.powi(halvings as i32))
}

/// Loss over a batch and its gradient with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct BceOutcome {
    pub loss: f64,
    pub observed: usize,
    pub grad: Vec<Vec<f64>>,
}

/// Mean binary cross-entropy over the observed entries of a whole batch;
/// zero when nothing is observed. Clamped predictions get zero gradient.
pub fn partial_bce_batch(preds: &[Vec<f64>], labels: &[&TriStateLabelVector]) -> Result<BceOutcome> {
    if preds.len() != labels.len() {
        return Err(Error::shape(labels.len(), preds.len()));
    }
    let observed: usize = labels.iter().map(|l| l.observed_count()).sum();
    let mut grad: Vec<Vec<f64>> = preds.iter().map(|p| vec![0.0; p.len()]).collect();
    if observed == 0 {
        return Ok(BceOutcome {
            loss: 0.0,
            observed,
            grad,
        });
    }
    let n = observed as f64;
    let mut total = 0.0;
    for ((p, l), g) in preds.iter().zip(labels).zip(&mut grad) {
        if p.len() != l.len() {
            return Err(Error::LengthMismatch {
                expected: l.len(),
                actual: p.len(),
            });
        }
        for ((pi, s), gi) in p.iter().zip(l.states()).zip(g.iter_mut()) {
            let y = match s {
                LabelState::Positive => 1.0,
                LabelState::Negative => 0.0,
                LabelState::Missing => continue,
            };
            let q = pi.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            if q == *pi {
                *gi = (-y / q + (1.0 - y) / (1.0 - q)) / n;
            }
        }
    }
    Ok(BceOutcome {
        loss: total / n,
        observed,
        grad,
    })
}

pub fn partial_bce(pred: &[f64], labels: &TriStateLabelVector) -> Result<f64> {
    Ok(partial_bce_batch(&[pred.to_vec()], &[labels])?.loss)
}

/// The trainable half of `reprogrammer -> backbone -> mapper`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub reprogrammer: Reprogrammer,
    pub mapper: LabelMapper,
}

impl Model {
    /// Builds freshly initialized components from the configuration.
    pub fn build(cfg: &ExperimentConfig, targets: &Vocabulary, k_src: usize, seed: u64) -> Result<Self> {
        let reprogrammer = Reprogrammer::init(&cfg.reprogrammer, seed)?;
        let mapper = match cfg.mapper.kind {
            MapperKind::Fcl => LabelMapper::Fcl(FclMapper::init(k_src, targets.size(), seed)),
            MapperKind::ManyToOne => {
                let path = std::path::Path::new(&cfg.mapper.assignment);
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                LabelMapper::ManyToOne(ManyToOneAssignment::parse(&text, targets, None, k_src)?)
            }
        };
        Ok(Self { reprogrammer, mapper })
    }

    /// Reprogrammer parameters followed by mapper parameters.
    pub fn trainable(&self) -> Vec<&Param> {
        let mut p = self.reprogrammer.params();
        p.extend(self.mapper.params());
        p
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.reprogrammer.params_mut();
        p.extend(self.mapper.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|p| p.len()).sum()
    }

    /// Target probabilities (evaluation mode).
    pub fn predict(&self, backbone: &dyn FrozenBackbone, x: &Spectrogram) -> Result<Vec<f64>> {
        let x_hat = self.reprogrammer.forward(x)?;
        self.mapper.forward(&backbone.score(&x_hat)?)
    }

    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        restore_blocks(&ckpt.params, self.trainable_mut())?;
        restore_blocks(&ckpt.buffers, self.reprogrammer.buffers_mut())
    }
}

/// One training example as the step function sees it.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub clip_id: &'a str,
    pub x: &'a Spectrogram,
    pub labels: &'a TriStateLabelVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub observed: usize,
}

fn non_finite(batch: &[Example], bad: impl Fn(usize) -> bool) -> Error {
    let ids: Vec<String> = (0..batch.len())
        .filter(|i| bad(*i))
        .map(|i| batch[i].clip_id.to_string())
        .collect();
    Error::NonFiniteLoss(if ids.is_empty() {
        batch.iter().map(|e| e.clip_id.to_string()).collect()
    } else {
        ids
    })
}

/// One optimizer step on a batch. Gradients reach the reprogrammer only
/// through [`FrozenBackbone::backprop_input`]. A batch without observed
/// labels leaves all state untouched.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    backbone: &dyn FrozenBackbone,
    batch: &[Example],
    lr: f64,
) -> Result<StepOutcome> {
    for e in batch {
        backbone.check_input(e.x)?;
        if e.labels.len() != model.mapper.n_targets() {
            return Err(Error::LengthMismatch {
                expected: model.mapper.n_targets(),
                actual: e.labels.len(),
            });
        }
    }
    let labels: Vec<&TriStateLabelVector> = batch.iter().map(|e| e.labels).collect();
    if labels.iter().all(|l| l.observed_count() == 0) {
        return Ok(StepOutcome {
            loss: 0.0,
            observed: 0,
        });
    }

    let xs: Vec<&Spectrogram> = batch.iter().map(|e| e.x).collect();
    let (outs, cache) = model.reprogrammer.forward_batch(&xs, Mode::Train)?;
    let (t, f) = model.reprogrammer.dims();
    let hop = batch[0].x.frame_hop_ms();
    let x_hats: Vec<Spectrogram> = outs
        .into_iter()
        .map(|v| Spectrogram::from_parts_unchecked(v, t, f, hop))
        .collect();
    if x_hats.iter().any(|x| x.values().iter().any(|v| !v.is_finite())) {
        return Err(non_finite(batch, |i| {
            x_hats[i].values().iter().any(|v| !v.is_finite())
        }));
    }
    let scores = x_hats
        .iter()
        .map(|x| backbone.score(x))
        .collect::<Result<Vec<_>>>()?;
    let probs = scores
        .iter()
        .map(|s| model.mapper.forward(s))
        .collect::<Result<Vec<_>>>()
        .map_err(|_| non_finite(batch, |i| scores[i].iter().any(|v| !v.is_finite())))?;
    let bce = partial_bce_batch(&probs, &labels)?;
    if !bce.loss.is_finite() {
        return Err(non_finite(batch, |i| probs[i].iter().any(|v| !v.is_finite())));
    }

    let mut mapper_grads: Vec<Vec<f64>> = model.mapper.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut input_grads = Vec::with_capacity(batch.len());
    let needs_input_grad = !model.reprogrammer.params().is_empty();
    for ((s, g), x_hat) in scores.iter().zip(&bce.grad).zip(&x_hats) {
        let (pg, d_scores) = model.mapper.backward(s, g)?;
        for (acc, gi) in mapper_grads.iter_mut().zip(pg) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
        if needs_input_grad {
            input_grads.push(backbone.backprop_input(x_hat, &d_scores)?);
        }
    }
    let mut grads = if needs_input_grad {
        model.reprogrammer.backward_batch(&cache, &input_grads)?
    } else {
        Vec::new()
    };
    grads.extend(mapper_grads);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(non_finite(batch, |_| false));
    }
    optimizer.step(&mut model.trainable_mut(), &grads, lr)?;
    model.reprogrammer.commit_batch_stats(&cache);
    Ok(StepOutcome {
        loss: bce.loss,
        observed: bce.observed,
    })
}

/// Probabilities for the given records, in order.
pub fn predict_records(
    model: &Model,
    backbone: &dyn FrozenBackbone,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    indices
        .iter()
        .map(|&i| model.predict(backbone, &*dataset.spectrogram(i)?))
        .collect()
}

pub fn evaluate_split(
    model: &Model,
    backbone: &dyn FrozenBackbone,
    dataset: &Dataset,
    split: SplitTag,
    threshold: f64,
) -> Result<F1Breakdown> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    let probs = predict_records(model, backbone, dataset, &idx)?;
    let preds = probs
        .iter()
        .map(|p| binarize(p, threshold))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<TriStateLabelVector> = idx.iter().map(|&i| dataset.records[i].labels.clone()).collect();
    macro_f1(&preds, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_macro_f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:.8},{:.6}",
            r.epoch, r.lr, r.train_loss, r.val_macro_f1
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    /// Evaluated with the parameters exactly as stored in the checkpoint.
    pub test_report: Option<EvalReport>,
    pub fingerprint_before: Fingerprint,
    pub fingerprint_after: Fingerprint,
}

impl FitOutcome {
    pub fn test_macro_f1(&self) -> Option<f64> {
        self.test_report.as_ref().map(EvalReport::macro_f1)
    }
}

fn snapshot(
    cfg: &ExperimentConfig,
    seed: u64,
    epoch: usize,
    val: f64,
    fingerprint: Fingerprint,
    rng: &Lcg64,
    model: &Model,
    opt: &Adam,
) -> Checkpoint {
    Checkpoint {
        config_text: cfg.canonical_text(),
        seed,
        epoch,
        best_val_macro_f1: val,
        fingerprint,
        rng_state: rng.state(),
        optimizer_step: opt.step_count(),
        params: model.trainable().into_iter().cloned().collect(),
        buffers: model.reprogrammer.buffers().into_iter().cloned().collect(),
        adam_m: opt.first_moments().to_vec(),
        adam_v: opt.second_moments().to_vec(),
    }
}

/// Rebuilds a model from a checkpoint (values at single precision, as stored).
pub fn model_from_checkpoint(
    cfg: &ExperimentConfig,
    targets: &Vocabulary,
    backbone: &dyn FrozenBackbone,
    ckpt: &Checkpoint,
) -> Result<Model> {
    ckpt.verify_fingerprint(&backbone.fingerprint())?;
    let mut model = Model::build(cfg, targets, backbone.k_src(), ckpt.seed)?;
    model.load_state(ckpt)?;
    Ok(model)
}

pub fn test_report(
    cfg: &ExperimentConfig,
    model: &Model,
    backbone: &dyn FrozenBackbone,
    dataset: &Dataset,
    split: SplitTag,
    seed: u64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        split: split.as_str().to_string(),
        class_names: dataset.vocab.names().to_vec(),
        metrics: evaluate_split(model, backbone, dataset, split, cfg.eval_threshold)?,
        trainable_params: model.param_count(),
        seed,
        config_hash: cfg.short_hash(),
    })
}

/// Trains one seed for `total_epochs`, keeping the epoch with the best
/// validation macro-F1 (earliest on ties).
pub fn fit(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    backbone: &dyn FrozenBackbone,
    seed: u64,
) -> Result<FitOutcome> {
    let plan = &cfg.train;
    let train_idx = dataset.indices(SplitTag::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("TRAIN"));
    }
    if dataset.indices(SplitTag::Val).is_empty() {
        return Err(Error::EmptySplit("VAL"));
    }
    let fingerprint_before = backbone.fingerprint();
    let mut model = Model::build(cfg, &dataset.vocab, backbone.k_src(), seed)?;
    let mut opt = Adam::new(&model.trainable());
    let mut rng = Lcg64::derive(seed, "batch-order");
    let mut order = train_idx;
    let mut metrics = Vec::with_capacity(plan.total_epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=plan.total_epochs {
        let lr = lr_at_epoch(epoch, plan)?;
        rng.shuffle(&mut order);
        let (mut weighted, mut observed) = (0.0, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let xs = chunk
                .iter()
                .map(|&i| dataset.spectrogram(i))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<Example> = chunk
                .iter()
                .zip(&xs)
                .map(|(&i, x)| Example {
                    clip_id: &dataset.records[i].clip_id,
                    x,
                    labels: &dataset.records[i].labels,
                })
                .collect();
            let step = train_step(&mut model, &mut opt, backbone, &batch, lr)?;
            weighted += step.loss * step.observed as f64;
            observed += step.observed;
        }
        let val = evaluate_split(&model, backbone, dataset, SplitTag::Val, cfg.eval_threshold)?.macro_f1;
        let train_loss = if observed > 0 {
            weighted / observed as f64
        } else {
            0.0
        };
        log::info!("seed {seed} epoch {epoch}: lr {lr:e} loss {train_loss:.5} val macro-F1 {val:.4}");
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_macro_f1: val,
        });
        if best.as_ref().is_none_or(|b| val > b.best_val_macro_f1) {
            best = Some(snapshot(
                cfg,
                seed,
                epoch,
                val,
                fingerprint_before,
                &rng,
                &model,
                &opt,
            ));
        }
    }

    let fingerprint_after = backbone.fingerprint();
    // Round-trip through the stored encoding so later evaluation of the
    // checkpoint file reproduces these numbers exactly.
    let checkpoint = Checkpoint::decode(&best.expect("at least one epoch").encode())?;
    let restored = model_from_checkpoint(cfg, &dataset.vocab, backbone, &checkpoint)?;
    let test_report = if dataset.indices(SplitTag::Test).is_empty() {
        None
    } else {
        Some(test_report(
            cfg,
            &restored,
            backbone,
            dataset,
            SplitTag::Test,
            seed,
        )?)
    };
    Ok(FitOutcome {
        seed,
        metrics,
        checkpoint,
        test_report,
        fingerprint_before,
        fingerprint_after,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
