//! Experiment configuration: flat `section.key = value` text.
//!
//! Unknown keys are errors. The canonical form lists every key in sorted
//! order with its effective value; it is what run directories and
//! checkpoints store, and its SHA-256 identifies the configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::ToyBackbone;
use crate::dataio::{SyntheticSpec, DEFAULT_POS_THRESHOLD, DEFAULT_VAL_FRACTION};
use crate::datamodel::AUDIOSET_CLASSES;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::frontend::FrontendParams;
use crate::mapping::MapperKind;
use crate::reprogrammers::{ReprogrammerKind, ReprogrammerSpec};
use crate::training::TrainingPlan;

/// Environment variable that overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "REPROGRAM_DATA_ROOT";

/// Built-in configurations, selectable by name wherever a path is accepted.
pub const PRESETS: [(&str, &str); 8] = [
    ("ast_baseline", include_str!("../configs/ast_baseline.cfg")),
    ("ast_noise", include_str!("../configs/ast_noise.cfg")),
    ("ast_cnn", include_str!("../configs/ast_cnn.cfg")),
    ("ast_unet", include_str!("../configs/ast_unet.cfg")),
    ("synth_identity", include_str!("../configs/synth_identity.cfg")),
    ("synth_noise", include_str!("../configs/synth_noise.cfg")),
    ("synth_cnn", include_str!("../configs/synth_cnn.cfg")),
    ("synth_unet", include_str!("../configs/synth_unet.cfg")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    OpenMic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Toy,
    Ast,
}

macro_rules! keyword_enum {
    ($ty:ty, $key:literal, $($variant:path => $text:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $text),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    other => Err(Error::config(
                        $key,
                        format!("`{other}` is not one of: {}", [$($text),+].join(", ")),
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(DataSource, "data.source", DataSource::Synthetic => "synthetic", DataSource::OpenMic => "openmic");
keyword_enum!(BackboneKind, "backbone.kind", BackboneKind::Toy => "toy", BackboneKind::Ast => "ast");

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: String,
    /// Where spectrograms computed from audio are cached; empty means a
    /// sibling of the dataset root (`<root>.cache`), never inside it.
    pub cache_dir: String,
    pub pos_threshold: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub seed: u64,
    pub k_src: usize,
    pub patch: usize,
    pub input_gain: f64,
    pub bias_scale: f64,
    pub reference_level: f64,
    pub output_scale: f64,
    pub weights: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub kind: MapperKind,
    /// Many-to-one assignment file (`target: source, ...` lines).
    pub assignment: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Synthetic generator settings; `dims` always mirror the frontend shape.
    pub synthetic: SyntheticSpec,
    pub frontend: FrontendParams,
    pub backbone: BackboneConfig,
    /// `dims` always mirror the frontend shape.
    pub reprogrammer: ReprogrammerSpec,
    pub mapper: MapperConfig,
    pub train: TrainingPlan,
    pub eval_threshold: f64,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let frontend = FrontendParams::default();
        let dims = (frontend.target_frames, frontend.n_mels);
        Self {
            data: DataConfig {
                source: DataSource::OpenMic,
                root: "data/openmic-2018".into(),
                cache_dir: String::new(),
                pos_threshold: DEFAULT_POS_THRESHOLD,
                val_fraction: DEFAULT_VAL_FRACTION,
                split_seed: 0,
            },
            synthetic: SyntheticSpec {
                dims,
                ..SyntheticSpec::default()
            },
            backbone: BackboneConfig {
                kind: BackboneKind::Ast,
                seed: 0,
                k_src: AUDIOSET_CLASSES,
                patch: 16,
                input_gain: ToyBackbone::DEFAULT_INPUT_GAIN,
                bias_scale: ToyBackbone::DEFAULT_BIAS_SCALE,
                reference_level: 0.0,
                output_scale: 1.0,
                weights: "weights/ast-audioset.bin".into(),
            },
            reprogrammer: ReprogrammerSpec::new(ReprogrammerKind::Unet, dims),
            mapper: MapperConfig {
                kind: MapperKind::Fcl,
                assignment: String::new(),
            },
            frontend,
            train: TrainingPlan::default(),
            eval_threshold: DEFAULT_THRESHOLD,
            seed: 1,
            repeats: 10,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a valid number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::config(key, "expected three comma-separated widths"))
}

impl ExperimentConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Preset name or path to a configuration file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::parse(&text);
        }
        match PRESETS.iter().find(|(n, _)| *n == name_or_path) {
            Some((_, text)) => Self::parse(text),
            None => Err(Error::config(
                "config",
                format!(
                    "`{name_or_path}` is neither a file nor a preset ({})",
                    PRESETS.map(|(n, _)| n).join(", ")
                ),
            )),
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like `key=value`"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synthetic;
        match key {
            "data.source" => self.data.source = value.parse()?,
            "data.root" => self.data.root = value.to_string(),
            "data.cache_dir" => self.data.cache_dir = value.to_string(),
            "data.pos_threshold" => self.data.pos_threshold = parse_num(key, value)?,
            "data.val_fraction" => self.data.val_fraction = parse_num(key, value)?,
            "data.split_seed" => self.data.split_seed = parse_num(key, value)?,
            "synthetic.n_clips" => s.n_clips = parse_num(key, value)?,
            "synthetic.n_classes" => s.n_classes = parse_num(key, value)?,
            "synthetic.positive_rate" => s.positive_rate = parse_num(key, value)?,
            "synthetic.missing_rate" => s.missing_rate = parse_num(key, value)?,
            "synthetic.label_noise" => s.label_noise = parse_num(key, value)?,
            "synthetic.test_fraction" => s.test_fraction = parse_num(key, value)?,
            "synthetic.blob_frames" => s.blob_frames = parse_num(key, value)?,
            "synthetic.blob_bins" => s.blob_bins = parse_num(key, value)?,
            "synthetic.blob_gain" => s.blob_gain = parse_num(key, value)?,
            "synthetic.noise_std" => s.noise_std = parse_num(key, value)?,
            "synthetic.band_offset_std" => s.band_offset_std = parse_num(key, value)?,
            "synthetic.distractor_rate" => s.distractor_rate = parse_num(key, value)?,
            "synthetic.distractor_frames" => s.distractor_frames = parse_num(key, value)?,
            "synthetic.distractor_bins" => s.distractor_bins = parse_num(key, value)?,
            "synthetic.distractor_gain" => s.distractor_gain = parse_num(key, value)?,
            "synthetic.seed" => s.seed = parse_num(key, value)?,
            "frontend.n_mels" => self.frontend.n_mels = parse_num(key, value)?,
            "frontend.win_ms" => self.frontend.win_ms = parse_num(key, value)?,
            "frontend.hop_ms" => self.frontend.hop_ms = parse_num(key, value)?,
            "frontend.target_frames" => self.frontend.target_frames = parse_num(key, value)?,
            "frontend.norm_mean" => self.frontend.norm_mean = parse_num(key, value)?,
            "frontend.norm_std" => self.frontend.norm_std = parse_num(key, value)?,
            "backbone.kind" => self.backbone.kind = value.parse()?,
            "backbone.seed" => self.backbone.seed = parse_num(key, value)?,
            "backbone.k_src" => self.backbone.k_src = parse_num(key, value)?,
            "backbone.patch" => self.backbone.patch = parse_num(key, value)?,
            "backbone.input_gain" => self.backbone.input_gain = parse_num(key, value)?,
            "backbone.bias_scale" => self.backbone.bias_scale = parse_num(key, value)?,
            "backbone.reference_level" => self.backbone.reference_level = parse_num(key, value)?,
            "backbone.output_scale" => self.backbone.output_scale = parse_num(key, value)?,
            "backbone.weights" => self.backbone.weights = value.to_string(),
            "reprogrammer.kind" => self.reprogrammer.kind = value.parse()?,
            "reprogrammer.cnn_hidden" => self.reprogrammer.cnn_hidden = parse_num(key, value)?,
            "reprogrammer.cnn_relu" => self.reprogrammer.cnn_relu = parse_bool(key, value)?,
            "reprogrammer.unet_widths" => self.reprogrammer.unet_widths = parse_widths(key, value)?,
            "mapper.kind" => self.mapper.kind = value.parse()?,
            "mapper.assignment" => self.mapper.assignment = value.to_string(),
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.epochs" => self.train.total_epochs = parse_num(key, value)?,
            "train.lr0" => self.train.lr0 = parse_num(key, value)?,
            "train.warm_epochs" => self.train.warm_epochs = parse_num(key, value)?,
            "train.halve_every" => self.train.halve_every = parse_num(key, value)?,
            "eval.threshold" => self.eval_threshold = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "repeats" => self.repeats = parse_num(key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        self.sync_dims();
        Ok(())
    }

    fn sync_dims(&mut self) {
        let dims = self.dims();
        self.synthetic.dims = dims;
        self.reprogrammer.dims = dims;
    }

    /// `(frames, mel bands)` of every spectrogram in the experiment.
    pub fn dims(&self) -> (usize, usize) {
        (self.frontend.target_frames, self.frontend.n_mels)
    }

    /// Every key with its effective value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synthetic;
        let w = self.reprogrammer.unet_widths;
        let mut e: Vec<(&'static str, String)> = vec![
            ("data.source", self.data.source.to_string()),
            ("data.root", self.data.root.clone()),
            ("data.cache_dir", self.data.cache_dir.clone()),
            ("data.pos_threshold", self.data.pos_threshold.to_string()),
            ("data.val_fraction", self.data.val_fraction.to_string()),
            ("data.split_seed", self.data.split_seed.to_string()),
            ("synthetic.n_clips", s.n_clips.to_string()),
            ("synthetic.n_classes", s.n_classes.to_string()),
            ("synthetic.positive_rate", s.positive_rate.to_string()),
            ("synthetic.missing_rate", s.missing_rate.to_string()),
            ("synthetic.label_noise", s.label_noise.to_string()),
            ("synthetic.test_fraction", s.test_fraction.to_string()),
            ("synthetic.blob_frames", s.blob_frames.to_string()),
            ("synthetic.blob_bins", s.blob_bins.to_string()),
            ("synthetic.blob_gain", s.blob_gain.to_string()),
            ("synthetic.noise_std", s.noise_std.to_string()),
            ("synthetic.band_offset_std", s.band_offset_std.to_string()),
            ("synthetic.distractor_rate", s.distractor_rate.to_string()),
            ("synthetic.distractor_frames", s.distractor_frames.to_string()),
            ("synthetic.distractor_bins", s.distractor_bins.to_string()),
            ("synthetic.distractor_gain", s.distractor_gain.to_string()),
            ("synthetic.seed", s.seed.to_string()),
            ("frontend.n_mels", self.frontend.n_mels.to_string()),
            ("frontend.win_ms", self.frontend.win_ms.to_string()),
            ("frontend.hop_ms", self.frontend.hop_ms.to_string()),
            ("frontend.target_frames", self.frontend.target_frames.to_string()),
            ("frontend.norm_mean", self.frontend.norm_mean.to_string()),
            ("frontend.norm_std", self.frontend.norm_std.to_string()),
            ("backbone.kind", self.backbone.kind.to_string()),
            ("backbone.seed", self.backbone.seed.to_string()),
            ("backbone.k_src", self.backbone.k_src.to_string()),
            ("backbone.patch", self.backbone.patch.to_string()),
            ("backbone.input_gain", self.backbone.input_gain.to_string()),
            ("backbone.bias_scale", self.backbone.bias_scale.to_string()),
            (
                "backbone.reference_level",
                self.backbone.reference_level.to_string(),
            ),
            ("backbone.output_scale", self.backbone.output_scale.to_string()),
            ("backbone.weights", self.backbone.weights.clone()),
            ("reprogrammer.kind", self.reprogrammer.kind.to_string()),
            (
                "reprogrammer.cnn_hidden",
                self.reprogrammer.cnn_hidden.to_string(),
            ),
            ("reprogrammer.cnn_relu", self.reprogrammer.cnn_relu.to_string()),
            ("reprogrammer.unet_widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("mapper.kind", self.mapper.kind.to_string()),
            ("mapper.assignment", self.mapper.assignment.clone()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", self.train.total_epochs.to_string()),
            ("train.lr0", self.train.lr0.to_string()),
            ("train.warm_epochs", self.train.warm_epochs.to_string()),
            ("train.halve_every", self.train.halve_every.to_string()),
            ("eval.threshold", self.eval_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("repeats", self.repeats.to_string()),
        ];
        e.sort_by(|a, b| a.0.cmp(b.0));
        e
    }

    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// First 16 hex digits of [`ExperimentConfig::hash`], used in reports.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// Applies the dataset-root environment override, if set.
    pub fn apply_env(&mut self) {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                self.data.root = root;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frontend.n_mels", self.frontend.n_mels),
            ("frontend.target_frames", self.frontend.target_frames),
            ("backbone.k_src", self.backbone.k_src),
            ("backbone.patch", self.backbone.patch),
            ("reprogrammer.cnn_hidden", self.reprogrammer.cnn_hidden),
            ("train.batch_size", self.train.batch_size),
            ("train.epochs", self.train.total_epochs),
            ("train.warm_epochs", self.train.warm_epochs),
            ("train.halve_every", self.train.halve_every),
            ("repeats", self.repeats),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.reprogrammer.unet_widths.contains(&0) {
            return Err(Error::config(
                "reprogrammer.unet_widths",
                "widths must be positive",
            ));
        }
        if !(self.train.lr0 > 0.0 && self.train.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::config("eval.threshold", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.data.pos_threshold) {
            return Err(Error::config("data.pos_threshold", "must lie in [0, 1]"));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        for (key, v) in [
            ("backbone.input_gain", self.backbone.input_gain),
            ("backbone.bias_scale", self.backbone.bias_scale),
            ("backbone.reference_level", self.backbone.reference_level),
            ("backbone.output_scale", self.backbone.output_scale),
        ] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        let (t, f) = self.dims();
        if self.reprogrammer.kind == ReprogrammerKind::Unet && (t % 8 != 0 || f % 8 != 0) {
            return Err(Error::config(
                "frontend.target_frames",
                format!("U-Net needs frames and mel bands divisible by 8, got {t}x{f}"),
            ));
        }
        self.frontend
            .validate()
            .map_err(|e| Error::config("frontend", e.to_string()))?;
        if self.backbone.kind == BackboneKind::Ast
            && (self.dims() != crate::backbone::AstAdapter::INPUT_DIMS
                || self.backbone.k_src != AUDIOSET_CLASSES)
        {
            return Err(Error::config(
                "backbone.kind",
                "the AST backbone needs 1024 frames, 128 mel bands and 527 source classes",
            ));
        }
        if self.mapper.kind == MapperKind::ManyToOne && self.mapper.assignment.is_empty() {
            return Err(Error::config(
                "mapper.assignment",
                "many_to_one mapping needs an assignment file",
            ));
        }
        if self.data.source == DataSource::Synthetic {
            self.synthetic.validate()?;
        }
        Ok(())
    }
}
