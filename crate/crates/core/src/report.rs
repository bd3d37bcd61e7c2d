//! Cross-run comparisons: label distributions, per-class F1 side by side and
//! the positive-count/F1 correlation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::dataio::{label_stats, LabelStats};
use crate::error::{Error, Result};
use crate::evaluation::{label_distribution_csv, positive_count_correlation};
use crate::experiment::{self, CONFIG_FILE, SEEDS_FILE};

/// Per-class test F1 of every seed of one training run.
#[derive(Debug, Clone)]
pub struct RunResults {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub per_seed: Vec<(u64, Vec<f64>)>,
}

impl RunResults {
    /// Mean per-class F1 over seeds.
    pub fn mean_f1(&self) -> Vec<f64> {
        let n = self.per_seed.len().max(1) as f64;
        let mut out = vec![0.0; self.class_names.len()];
        for (_, f1s) in &self.per_seed {
            for (o, f) in out.iter_mut().zip(f1s) {
                *o += f / n;
            }
        }
        out
    }

    pub fn macro_f1(&self) -> f64 {
        let m = self.mean_f1();
        m.iter().sum::<f64>() / m.len().max(1) as f64
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Class names and F1 column of a `report.csv`.
pub fn parse_report_csv(path: &Path, text: &str) -> Result<(Vec<String>, Vec<f64>)> {
    let bad = |message: String| Error::DataFormat {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("class,n_pos,n_neg,precision,recall,f1") {
        return Err(bad("unexpected header".into()));
    }
    let (mut names, mut f1s) = (Vec::new(), Vec::new());
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns in `{line}`")));
        }
        if cols[0] == "macro" {
            return Ok((names, f1s));
        }
        names.push(cols[0].to_string());
        f1s.push(
            cols[5]
                .parse()
                .map_err(|_| bad(format!("bad F1 `{}`", cols[5])))?,
        );
    }
    Err(bad("missing macro row".into()))
}

/// Reads a run directory written by training.
pub fn load_run(dir: &Path) -> Result<RunResults> {
    let config = ExperimentConfig::parse(&read(&dir.join(CONFIG_FILE))?)?;
    let seeds_path = dir.join(SEEDS_FILE);
    let mut class_names = Vec::new();
    let mut per_seed = Vec::new();
    for line in read(&seeds_path)?.lines().filter(|l| !l.trim().is_empty()) {
        let seed: u64 = line.trim().parse().map_err(|_| Error::DataFormat {
            path: seeds_path.clone(),
            message: format!("bad seed `{line}`"),
        })?;
        let path = experiment::seed_dir(dir, seed).join("report.csv");
        if !path.is_file() {
            // Seed not finished; an interrupted run still reports the rest.
            continue;
        }
        let (names, f1s) = parse_report_csv(&path, &read(&path)?)?;
        if !class_names.is_empty() && names != class_names {
            return Err(Error::DataFormat {
                path,
                message: "class list differs from other seeds".into(),
            });
        }
        class_names = names;
        per_seed.push((seed, f1s));
    }
    if per_seed.is_empty() {
        return Err(Error::NoRunsFound(dir.display().to_string()));
    }
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunResults {
        name,
        dir: dir.to_path_buf(),
        config,
        class_names,
        per_seed,
    })
}

/// Each path is a run directory or a directory whose children are run
/// directories. Children without finished seeds are skipped.
pub fn find_runs(paths: &[PathBuf]) -> Result<Vec<RunResults>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join(CONFIG_FILE).is_file() {
            runs.push(load_run(p)?);
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        let mut children: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(CONFIG_FILE).is_file())
            .collect();
        children.sort();
        for c in children {
            match load_run(&c) {
                Ok(r) => runs.push(r),
                Err(Error::NoRunsFound(_)) => log::warn!("{} has no finished seeds", c.display()),
                Err(e) => return Err(e),
            }
        }
    }
    if runs.is_empty() {
        let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::NoRunsFound(joined.join(", ")));
    }
    Ok(runs)
}

/// Label statistics of the dataset a configuration describes.
pub fn dataset_label_stats(cfg: &ExperimentConfig) -> Result<(Vec<String>, LabelStats)> {
    let (vocab, records) = experiment::load_records(cfg)?;
    Ok((vocab.names().to_vec(), label_stats(&records)?))
}

pub fn distribution_csv(names: &[String], stats: &LabelStats) -> String {
    let pos: Vec<usize> = stats.per_class.iter().map(|c| c.positives).collect();
    let neg: Vec<usize> = stats.per_class.iter().map(|c| c.negatives).collect();
    label_distribution_csv(names, &pos, &neg)
}

pub fn distribution_text(names: &[String], stats: &LabelStats) -> String {
    let mut out = String::new();
    let width = names.iter().map(String::len).max().unwrap_or(5).max(5);
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}",
        "class", "positive", "negative", "missing"
    );
    for (n, c) in names.iter().zip(&stats.per_class) {
        let _ = writeln!(
            out,
            "{n:<width$}  {:>9}  {:>9}  {:>9}",
            c.positives, c.negatives, c.missing
        );
    }
    let _ = writeln!(
        out,
        "{} clips, {} observed labels, {:.1}% missing",
        stats.n_records,
        stats.observed(),
        100.0 * stats.missing_fraction()
    );
    out
}

fn check_same_classes(runs: &[RunResults]) -> Result<&[String]> {
    let first = &runs[0];
    for r in &runs[1..] {
        if r.class_names != first.class_names {
            return Err(Error::DataFormat {
                path: r.dir.clone(),
                message: format!("classes differ from run {}", first.name),
            });
        }
    }
    Ok(&first.class_names)
}

/// `class,<run>,...` with the seed-mean F1 of each run; last row is macro.
pub fn comparison_csv(runs: &[RunResults]) -> Result<String> {
    let names = check_same_classes(runs)?;
    let means: Vec<Vec<f64>> = runs.iter().map(RunResults::mean_f1).collect();
    let mut out = String::from("class");
    for r in runs {
        let _ = write!(out, ",{}", r.name);
    }
    out.push('\n');
    for (c, name) in names.iter().enumerate() {
        out.push_str(name);
        for m in &means {
            let _ = write!(out, ",{:.6}", m[c]);
        }
        out.push('\n');
    }
    out.push_str("macro");
    for r in runs {
        let _ = write!(out, ",{:.6}", r.macro_f1());
    }
    out.push('\n');
    Ok(out)
}

pub fn comparison_text(runs: &[RunResults]) -> Result<String> {
    let names = check_same_classes(runs)?;
    let means: Vec<Vec<f64>> = runs.iter().map(RunResults::mean_f1).collect();
    let width = names.iter().map(String::len).max().unwrap_or(5).max(5);
    let cols: Vec<usize> = runs.iter().map(|r| r.name.len().max(8)).collect();
    let mut out = format!("{:<width$}", "class");
    for (r, w) in runs.iter().zip(&cols) {
        let _ = write!(out, "  {:>w$}", r.name);
    }
    out.push('\n');
    for (c, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<width$}");
        for (m, w) in means.iter().zip(&cols) {
            let _ = write!(out, "  {:>w$.4}", m[c]);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<width$}", "macro");
    for (r, w) in runs.iter().zip(&cols) {
        let _ = write!(out, "  {:>w$.4}", r.macro_f1());
    }
    out.push('\n');
    Ok(out)
}

/// Pearson correlation between dataset positive counts and the run's mean
/// per-class F1. `Err` carries the reason it is undefined.
pub fn run_correlation(run: &RunResults, stats: &LabelStats) -> std::result::Result<f64, String> {
    let pos: Vec<f64> = stats.per_class.iter().map(|c| c.positives as f64).collect();
    let f1 = run.mean_f1();
    match positive_count_correlation(&pos, &f1) {
        Ok(r) => Ok(r),
        Err(Error::ZeroVariance(what)) => Err(format!("undefined: {what} are constant across classes")),
        Err(e) => Err(format!("undefined: {e}")),
    }
}

/// One line per run: `run,<name>,<r or "undefined">,<reason>`.
pub fn correlation_csv(runs: &[RunResults], stats: &[LabelStats]) -> String {
    let mut out = String::from("run,pearson_r,note\n");
    for (run, st) in runs.iter().zip(stats) {
        match run_correlation(run, st) {
            Ok(r) => {
                let _ = writeln!(out, "{},{r:.6},", run.name);
            }
            Err(why) => {
                let _ = writeln!(out, "{},undefined,{}", run.name, why.replace(',', ";"));
            }
        }
    }
    out
}
