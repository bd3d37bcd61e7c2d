//! Metrics and report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::datamodel::{LabelState, TriStateLabelVector};
use crate::error::{Error, Result};
use crate::mapping::{FclMapper, MapperKind};
use crate::reprogrammers::{ReprogrammerKind, ReprogrammerSpec};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where `prob >= threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::BadThreshold(threshold));
    }
    Ok(probs.iter().map(|p| u8::from(*p >= threshold)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn n_pos(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn n_neg(&self) -> usize {
        self.fp + self.tn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Breakdown {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
}

/// Per-class F1 over observed entries only and their unweighted mean. A
/// class with no true and no predicted positives scores 0 and still counts
/// in the average.
pub fn macro_f1(preds: &[Vec<u8>], labels: &[TriStateLabelVector]) -> Result<F1Breakdown> {
    if preds.len() != labels.len() {
        return Err(Error::shape(labels.len(), preds.len()));
    }
    let c_n = labels.first().map_or(0, |l| l.len());
    let mut per_class = vec![ClassMetrics::default(); c_n];
    for (p, l) in preds.iter().zip(labels) {
        if p.len() != c_n || l.len() != c_n {
            return Err(Error::shape(c_n, (p.len(), l.len())));
        }
        for (c, m) in per_class.iter_mut().enumerate() {
            let predicted = p[c] != 0;
            match (l.get(c), predicted) {
                (LabelState::Missing, _) => {}
                (LabelState::Positive, true) => m.tp += 1,
                (LabelState::Positive, false) => m.fn_ += 1,
                (LabelState::Negative, true) => m.fp += 1,
                (LabelState::Negative, false) => m.tn += 1,
            }
        }
    }
    for m in per_class.iter_mut() {
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn_);
        m.f1 = if m.precision + m.recall > 0.0 {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        } else {
            0.0
        };
    }
    let macro_f1 = if c_n == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / c_n as f64
    };
    Ok(F1Breakdown { per_class, macro_f1 })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pearson correlation between per-class positive counts and F1 scores.
pub fn positive_count_correlation(pos_counts: &[f64], f1s: &[f64]) -> Result<f64> {
    if pos_counts.len() != f1s.len() {
        return Err(Error::shape(pos_counts.len(), f1s.len()));
    }
    let n = pos_counts.len() as f64;
    let mx = pos_counts.iter().sum::<f64>() / n;
    let my = f1s.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pos_counts.iter().zip(f1s) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if pos_counts.len() < 2 || sxx == 0.0 {
        return Err(Error::ZeroVariance("positive counts"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("F1 scores"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Trainable-parameter budgets reported for the comparison systems, in
/// millions of parameters.
pub const REFERENCE_BUDGETS: [(&str, f64); 7] = [
    ("AST-BS", 0.017),
    ("CNN-BS", 0.017),
    ("AST-TL", 87.873),
    ("AST-NRP", 0.148),
    ("AST-CNNRP", 0.017),
    ("AST-URP", 0.018),
    ("MT", 0.111),
];

/// Accepted relative deviation from the reference budget. Wider than the
/// rounding of the reference values because the reference mapper width is
/// not known exactly.
pub const BUDGET_TOLERANCE: f64 = 0.30;

pub fn reference_budget(system: &str) -> Option<f64> {
    REFERENCE_BUDGETS
        .iter()
        .find(|(name, _)| *name == system)
        .map(|(_, m)| m * 1e6)
}

/// Name of the comparison system a reprogrammer + FCL configuration mirrors.
pub fn reference_system(kind: ReprogrammerKind) -> &'static str {
    match kind {
        ReprogrammerKind::Identity => "AST-BS",
        ReprogrammerKind::Noise => "AST-NRP",
        ReprogrammerKind::Cnn => "AST-CNNRP",
        ReprogrammerKind::Unet => "AST-URP",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
    pub reference_system: &'static str,
    pub reference: f64,
}

impl BudgetReport {
    pub fn deviation(&self) -> f64 {
        (self.total as f64 - self.reference) / self.reference
    }

    pub fn within_tolerance(&self) -> bool {
        self.deviation().abs() <= BUDGET_TOLERANCE
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(9);
        for (name, count) in &self.rows {
            let _ = writeln!(out, "{name:<width$}  {count:>12}");
        }
        let _ = writeln!(out, "{:<width$}  {:>12}", "total", self.total);
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.0}  ({}; deviation {:+.1}%, band +-{:.0}%: {})",
            "reference",
            self.reference,
            self.reference_system,
            100.0 * self.deviation(),
            100.0 * BUDGET_TOLERANCE,
            if self.within_tolerance() {
                "within"
            } else {
                "outside"
            }
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,parameters\n");
        for (name, count) in &self.rows {
            let _ = writeln!(out, "{name},{count}");
        }
        let _ = writeln!(out, "total,{}", self.total);
        let _ = writeln!(out, "reference:{},{:.0}", self.reference_system, self.reference);
        out
    }
}

/// Per-component trainable parameters, derived from layer shapes.
pub fn budget_report(
    reprogrammer: &ReprogrammerSpec,
    mapper: MapperKind,
    k_src: usize,
    n_targets: usize,
) -> BudgetReport {
    let r = reprogrammer.param_count();
    let m = match mapper {
        MapperKind::Fcl => FclMapper::param_count_for(k_src, n_targets),
        MapperKind::ManyToOne => 0,
    };
    let system = reference_system(reprogrammer.kind);
    BudgetReport {
        rows: vec![
            (format!("reprogrammer ({})", reprogrammer.kind), r),
            (format!("mapper ({mapper}, {k_src}->{n_targets})"), m),
        ],
        total: r + m,
        reference_system: system,
        reference: reference_budget(system).expect("known system"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub class_names: Vec<String>,
    pub metrics: F1Breakdown,
    pub trainable_params: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn macro_f1(&self) -> f64 {
        self.metrics.macro_f1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,n_pos,n_neg,precision,recall,f1\n");
        let per = &self.metrics.per_class;
        for (name, m) in self.class_names.iter().zip(per) {
            let _ = writeln!(
                out,
                "{name},{},{},{:.6},{:.6},{:.6}",
                m.n_pos(),
                m.n_neg(),
                m.precision,
                m.recall,
                m.f1
            );
        }
        let n = per.len().max(1) as f64;
        let _ = writeln!(
            out,
            "macro,{},{},{:.6},{:.6},{:.6}",
            per.iter().map(ClassMetrics::n_pos).sum::<usize>(),
            per.iter().map(ClassMetrics::n_neg).sum::<usize>(),
            per.iter().map(|m| m.precision).sum::<f64>() / n,
            per.iter().map(|m| m.recall).sum::<f64>() / n,
            self.metrics.macro_f1
        );
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "split {}  seed {}  config {}  trainable parameters {}",
            self.split, self.seed, self.config_hash, self.trainable_params
        );
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>9}  {:>9}  {:>9}",
            "class", "n_pos", "n_neg", "precision", "recall", "f1"
        );
        for (name, m) in self.class_names.iter().zip(&self.metrics.per_class) {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>6}  {:>6}  {:>9.4}  {:>9.4}  {:>9.4}",
                m.n_pos(),
                m.n_neg(),
                m.precision,
                m.recall,
                m.f1
            );
        }
        let _ = writeln!(out, "{:<width$}  macro F1 {:.4}", "", self.metrics.macro_f1);
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.csv"), &self.to_csv())?;
        write_file(&dir.join("report.txt"), &self.to_text())
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One row per class: observed positives and negatives, for bar plots.
pub fn label_distribution_csv(names: &[String], positives: &[usize], negatives: &[usize]) -> String {
    let mut out = String::from("class,positives,negatives\n");
    for ((n, p), q) in names.iter().zip(positives).zip(negatives) {
        let _ = writeln!(out, "{n},{p},{q}");
    }
    out
}
