//! End-to-end assembly: backbone, dataset and model from a configuration,
//! plus the run-directory layout written by training and evaluation.
//!
//! ```text
//! <run>/config.txt            canonical configuration, written first
//! <run>/seeds.txt             one seed per line
//! <run>/seed-<s>/metrics.csv  epoch,lr,train_loss,val_macro_f1
//! <run>/seed-<s>/checkpoint.rpk
//! <run>/seed-<s>/report.csv, report.txt   TEST split of the checkpoint
//! <run>/summary.csv, summary.txt          per-seed test macro-F1, mean, std
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{AstAdapter, FrozenBackbone, ToyBackbone, ToyBackboneSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{BackboneKind, DataSource, ExperimentConfig};
use crate::dataio::{self, Dataset, OpenMicLayout};
use crate::datamodel::{ClipRecord, SplitTag, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{budget_report, BudgetReport, EvalReport};
use crate::training::{self, FitOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const SEEDS_FILE: &str = "seeds.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rpk";

pub fn build_backbone(cfg: &ExperimentConfig) -> Result<Box<dyn FrozenBackbone>> {
    match cfg.backbone.kind {
        BackboneKind::Toy => Ok(Box::new(ToyBackbone::new(ToyBackboneSpec {
            seed: cfg.backbone.seed,
            dims: cfg.dims(),
            k_src: cfg.backbone.k_src,
            patch: cfg.backbone.patch,
            input_gain: cfg.backbone.input_gain,
            bias_scale: cfg.backbone.bias_scale,
            reference_level: cfg.backbone.reference_level,
            output_scale: cfg.backbone.output_scale,
        })?)),
        BackboneKind::Ast => Ok(Box::new(AstAdapter::open(Path::new(&cfg.backbone.weights))?)),
    }
}

fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.data.cache_dir.is_empty() {
        let root = cfg.data.root.trim_end_matches('/');
        PathBuf::from(format!("{root}.cache"))
    } else {
        PathBuf::from(&cfg.data.cache_dir)
    }
}

/// Target vocabulary of the configured data source, read without loading
/// any clips.
pub fn target_vocabulary(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    match cfg.data.source {
        DataSource::Synthetic => {
            Vocabulary::numbered(dataio::SYNTHETIC_CLASS_PREFIX, cfg.synthetic.n_classes)
        }
        DataSource::OpenMic => dataio::layout_vocabulary(Path::new(&cfg.data.root)),
    }
}

/// Parameter budget of the configured model, from shapes alone.
pub fn config_budget(cfg: &ExperimentConfig) -> Result<BudgetReport> {
    cfg.validate()?;
    let n_targets = target_vocabulary(cfg)?.size();
    Ok(budget_report(
        &cfg.reprogrammer,
        cfg.mapper.kind,
        cfg.backbone.k_src,
        n_targets,
    ))
}

/// Loads (OpenMIC) or generates (synthetic) the records with their TRAIN and
/// TEST tags; spectrograms of audio clips are not computed here.
pub fn load_records(cfg: &ExperimentConfig) -> Result<(Vocabulary, Vec<ClipRecord>)> {
    match cfg.data.source {
        DataSource::Synthetic => dataio::generate_synthetic(&cfg.synthetic),
        DataSource::OpenMic => {
            let root = Path::new(&cfg.data.root);
            if !root.is_dir() {
                return Err(Error::DataFormat {
                    path: root.to_path_buf(),
                    message: "dataset root does not exist".into(),
                });
            }
            let vocab = dataio::layout_vocabulary(root)?;
            let records =
                dataio::load_openmic(&OpenMicLayout::standard(root), &vocab, cfg.data.pos_threshold)?;
            Ok((vocab, records))
        }
    }
}

/// Loads or generates the records and carves the validation split.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (vocab, records) = load_records(cfg)?;
    let records = dataio::make_validation_split(records, cfg.data.val_fraction, cfg.data.split_seed)?;
    let ds = Dataset::new(vocab, records, cfg.frontend.clone())?;
    Ok(match cfg.data.source {
        DataSource::OpenMic => ds.with_cache_dir(cache_dir(cfg)),
        DataSource::Synthetic => ds,
    })
}

/// Creates `dir`, which must be absent or empty.
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::RunDirNotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed-{seed}"))
}

/// Seeds of a run: `seed, seed + 1, ...`, one per repeat.
pub fn run_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.repeats as u64).map(|k| cfg.seed + k).collect()
}

#[derive(Debug, Clone)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub test_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
    pub mean: f64,
    pub std: f64,
}

impl RunSummary {
    pub fn from_seeds(seeds: Vec<SeedSummary>) -> Self {
        let scores: Vec<f64> = seeds.iter().map(|s| s.test_macro_f1).collect();
        let (mean, std) = training::mean_std(&scores);
        Self { seeds, mean, std }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,best_epoch,best_val_macro_f1,test_macro_f1\n");
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                s.seed, s.best_epoch, s.best_val_macro_f1, s.test_macro_f1
            );
        }
        let _ = writeln!(out, "mean,,,{:.6}", self.mean);
        let _ = writeln!(out, "std,,,{:.6}", self.std);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "seed {:>4}  best epoch {:>3}  val macro-F1 {:.4}  test macro-F1 {:.4}",
                s.seed, s.best_epoch, s.best_val_macro_f1, s.test_macro_f1
            );
        }
        let _ = writeln!(
            out,
            "test macro-F1 over {} seed(s): mean {:.4}  std {:.4}",
            self.seeds.len(),
            self.mean,
            self.std
        );
        out
    }
}

/// Writes one seed's artifacts into `<run>/seed-<s>/`.
pub fn write_seed_outputs(run: &Path, outcome: &FitOutcome) -> Result<()> {
    let dir = seed_dir(run, outcome.seed);
    create_run_dir(&dir)?;
    write(&dir.join(METRICS_FILE), &training::metrics_csv(&outcome.metrics))?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(report) = &outcome.test_report {
        report.write(&dir)?;
    }
    Ok(())
}

/// Trains every seed of the configuration into `run`. The configuration
/// snapshot is on disk before the first epoch starts.
pub fn train_run(cfg: &ExperimentConfig, run: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let backbone = build_backbone(cfg)?;
    train_run_with(cfg, run, backbone.as_ref())
}

/// [`train_run`] around a caller-supplied backbone, for example an
/// [`AstAdapter`] with a registered inference engine.
pub fn train_run_with(
    cfg: &ExperimentConfig,
    run: &Path,
    backbone: &dyn FrozenBackbone,
) -> Result<RunSummary> {
    cfg.validate()?;
    if backbone.input_dims() != cfg.dims() {
        return Err(Error::shape(cfg.dims(), backbone.input_dims()));
    }
    create_run_dir(run)?;
    write(&run.join(CONFIG_FILE), &cfg.canonical_text())?;
    let seeds = run_seeds(cfg);
    let seed_lines: String = seeds.iter().map(|s| format!("{s}\n")).collect();
    write(&run.join(SEEDS_FILE), &seed_lines)?;

    let dataset = build_dataset(cfg)?;
    let mut summaries = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let outcome = training::fit(cfg, &dataset, backbone, seed)?;
        write_seed_outputs(run, &outcome)?;
        let test = outcome.test_macro_f1().ok_or(Error::EmptySplit("TEST"))?;
        log::info!(
            "seed {seed}: best epoch {} (val {:.4}), test macro-F1 {test:.4}",
            outcome.checkpoint.epoch,
            outcome.checkpoint.best_val_macro_f1
        );
        summaries.push(SeedSummary {
            seed,
            best_epoch: outcome.checkpoint.epoch,
            best_val_macro_f1: outcome.checkpoint.best_val_macro_f1,
            test_macro_f1: test,
        });
    }
    let summary = RunSummary::from_seeds(summaries);
    write(&run.join("summary.csv"), &summary.to_csv())?;
    write(&run.join("summary.txt"), &summary.to_text())?;
    Ok(summary)
}

/// Configuration stored in a checkpoint, with the dataset-root override.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::parse(&ckpt.config_text)?;
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

/// Evaluates a stored checkpoint on `split` against the live backbone.
pub fn evaluate_checkpoint(path: &Path, split: SplitTag) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ckpt)?;
    let backbone = build_backbone(&cfg)?;
    ckpt.verify_fingerprint(&backbone.fingerprint())?;
    let dataset = build_dataset(&cfg)?;
    let model = training::model_from_checkpoint(&cfg, &dataset.vocab, backbone.as_ref(), &ckpt)?;
    training::test_report(&cfg, &model, backbone.as_ref(), &dataset, split, ckpt.seed)
}

/// Writes evaluation reports into `dir`. Existing reports are only accepted
/// when byte-identical, so reruns are harmless and nothing is overwritten.
pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let files = [("report.csv", report.to_csv()), ("report.txt", report.to_text())];
    let existing: Vec<_> = files.iter().filter(|(n, _)| dir.join(n).exists()).collect();
    if !existing.is_empty() {
        for (name, text) in &files {
            let old = fs::read_to_string(dir.join(name)).unwrap_or_default();
            if &old != text {
                return Err(Error::RunDirNotEmpty(dir.to_path_buf()));
            }
        }
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write(dir)
}
