//! `reprogram`: train, evaluate and compare input-reprogramming experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error (including
//! corrupt or mismatched checkpoints), 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use reprogram_core::config::ExperimentConfig;
use reprogram_core::datamodel::SplitTag;
use reprogram_core::experiment::{self, CHECKPOINT_FILE};
use reprogram_core::{dataio, report, Error};

#[derive(Parser, Debug)]
#[command(
    name = "reprogram",
    version,
    about = "Input reprogramming of a frozen audio classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Preset name (e.g. `synth_unet`) or path to a config file.
    #[arg(long)]
    config: String,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more seeds into a new run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// First seed; repeats use seed, seed+1, ...
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Run directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (file or seed directory) on one split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory; defaults to `eval-<split>` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label distribution, per-class F1 across runs and the positive-count
    /// correlation.
    Report {
        /// Run directories, or directories containing runs.
        runs: Vec<PathBuf>,
        /// Dataset to summarize; defaults to the first run's configuration.
        #[arg(long)]
        config: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the tables as CSV files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the trainable-parameter budget of a configuration.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the synthetic dataset in the OpenMIC on-disk layout.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ConfigInvalid { .. }
        | Error::BadDims(_)
        | Error::BadThreshold(_)
        | Error::FractionOutOfRange(_)
        | Error::InvalidFrontend(_)
        | Error::EpochOutOfRange { .. }
        | Error::MappingParse { .. }
        | Error::EmptyAssignment(_)
        | Error::IndexOutOfRange { .. } => 2,
        Error::NonFiniteLoss(_) | Error::NonFiniteInput | Error::NonFiniteSamples => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train {
            config,
            seed,
            repeats,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            cfg.validate()?;
            info!("config {} -> {}", cfg.short_hash(), out.display());
            let summary = experiment::train_run(&cfg, &out)?;
            print!("{}", summary.to_text());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            split,
            out,
        } => {
            let split: SplitTag = split.parse()?;
            let path = if checkpoint.is_dir() {
                checkpoint.join(CHECKPOINT_FILE)
            } else {
                checkpoint
            };
            let report = experiment::evaluate_checkpoint(&path, split)?;
            let dir = out.unwrap_or_else(|| {
                path.parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(format!("eval-{split}"))
            });
            experiment::write_eval_report(&report, &dir)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Report {
            runs,
            config,
            overrides,
            out,
        } => cmd_report(&runs, config, &overrides, out.as_deref()),
        Command::CountParams { config } => {
            let cfg = config.load()?;
            print!("{}", experiment::config_budget(&cfg)?.to_text());
            Ok(())
        }
        Command::SynthData { config, out } => {
            let cfg = config.load()?;
            experiment::create_run_dir(&out)?;
            let (vocab, records) = dataio::generate_synthetic(&cfg.synthetic)?;
            dataio::write_openmic_layout(&out, &vocab, &records)?;
            println!(
                "{} clips, {} classes written to {}",
                records.len(),
                vocab.size(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Writes `text` to `path` unless an identical file is already there.
fn write_once(path: &Path, text: &str) -> Result<(), Error> {
    if path.exists() {
        let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if old == text {
            return Ok(());
        }
        return Err(Error::RunDirNotEmpty(path.to_path_buf()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_report(
    run_paths: &[PathBuf],
    config: Option<String>,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<(), Error> {
    let runs = if run_paths.is_empty() {
        Vec::new()
    } else {
        report::find_runs(run_paths)?
    };
    let dataset_cfg = match (&config, runs.first()) {
        (Some(c), _) => {
            let args = ConfigArgs {
                config: c.clone(),
                overrides: overrides.to_vec(),
            };
            args.load()?
        }
        (None, Some(r)) => {
            let mut cfg = r.config.clone();
            cfg.apply_env();
            cfg
        }
        (None, None) => return Err(Error::NoRunsFound("no run directories or --config given".into())),
    };
    let mut files: Vec<(&str, String)> = Vec::new();

    let (names, stats) = report::dataset_label_stats(&dataset_cfg)?;
    println!("label distribution");
    print!("{}", report::distribution_text(&names, &stats));
    files.push(("label_distribution.csv", report::distribution_csv(&names, &stats)));

    if !runs.is_empty() {
        println!();
        println!("per-class test F1 (mean over seeds)");
        print!("{}", report::comparison_text(&runs)?);
        files.push(("f1_comparison.csv", report::comparison_csv(&runs)?));

        // Each run is correlated against the positives of its own dataset.
        let mut run_stats = Vec::with_capacity(runs.len());
        for r in &runs {
            let mut cfg = r.config.clone();
            cfg.apply_env();
            run_stats.push(if cfg.canonical_text() == dataset_cfg.canonical_text() {
                stats.clone()
            } else {
                report::dataset_label_stats(&cfg)?.1
            });
        }
        println!();
        println!("correlation of per-class positive count with F1");
        for (r, st) in runs.iter().zip(&run_stats) {
            match report::run_correlation(r, st) {
                Ok(v) => println!("{:<20}  r = {v:.4}", r.name),
                Err(why) => println!("{:<20}  {why}", r.name),
            }
        }
        files.push(("correlation.csv", report::correlation_csv(&runs, &run_stats)));
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in &files {
            write_once(&dir.join(name), text)?;
        }
    }
    Ok(())
}
