//! Shared domain types: spectrograms, tri-state labels, vocabularies, clips.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// The 20 OpenMIC instrument classes in lexicographic order. This is the
/// single place the target class order is fixed.
pub const OPENMIC_INSTRUMENTS: [&str; 20] = [
    "accordion",
    "banjo",
    "bass",
    "cello",
    "clarinet",
    "cymbals",
    "drums",
    "flute",
    "guitar",
    "mallet_percussion",
    "mandolin",
    "organ",
    "piano",
    "saxophone",
    "synthesizer",
    "trombone",
    "trumpet",
    "ukulele",
    "violin",
    "voice",
];

/// Number of AudioSet classes scored by the pretrained transformer.
pub const AUDIOSET_CLASSES: usize = 527;

/// Dense time-by-frequency matrix of log-mel energies, stored row-major
/// (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f64>,
    frames: usize,
    n_mels: usize,
    frame_hop_ms: f64,
}

impl Spectrogram {
    pub fn new(values: Vec<f64>, frames: usize, n_mels: usize, frame_hop_ms: f64) -> Result<Self> {
        if frames == 0 || n_mels == 0 {
            return Err(Error::InvalidSpectrogram(format!(
                "dimensions must be positive, got {frames}x{n_mels}"
            )));
        }
        if values.len() != frames * n_mels {
            return Err(Error::InvalidSpectrogram(format!(
                "{} values for a {frames}x{n_mels} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpectrogram("non-finite entry".into()));
        }
        Ok(Self {
            values,
            frames,
            n_mels,
            frame_hop_ms,
        })
    }

    pub fn filled(frames: usize, n_mels: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; frames * n_mels], frames, n_mels, 10.0)
    }

    pub(crate) fn from_parts_unchecked(
        values: Vec<f64>,
        frames: usize,
        n_mels: usize,
        frame_hop_ms: f64,
    ) -> Self {
        debug_assert_eq!(values.len(), frames * n_mels);
        Self {
            values,
            frames,
            n_mels,
            frame_hop_ms,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn frame_hop_ms(&self) -> f64 {
        self.frame_hop_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_mels + f]
    }

    /// Same dimensions and hop, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.frames, self.n_mels, self.frame_hop_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelState {
    Positive,
    Negative,
    Missing,
}

impl LabelState {
    pub fn token(self) -> &'static str {
        match self {
            LabelState::Positive => "POS",
            LabelState::Negative => "NEG",
            LabelState::Missing => "MISS",
        }
    }
}

impl FromStr for LabelState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "POS" | "POSITIVE" | "1" => Ok(LabelState::Positive),
            "NEG" | "NEGATIVE" | "0" => Ok(LabelState::Negative),
            "MISS" | "MISSING" | "?" => Ok(LabelState::Missing),
            _ => Err(Error::InvalidState(s.to_string())),
        }
    }
}

impl fmt::Display for LabelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Per-clip instrument annotation: each class is positive, negative or missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TriStateLabelVector {
    states: Vec<LabelState>,
}

impl TriStateLabelVector {
    pub fn new(states: Vec<LabelState>) -> Self {
        Self { states }
    }

    pub fn all(state: LabelState, n: usize) -> Self {
        Self {
            states: vec![state; n],
        }
    }

    /// Parses whitespace- or comma-separated state tokens.
    pub fn parse(text: &str) -> Result<Self> {
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(LabelState::from_str)
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[LabelState] {
        &self.states
    }

    pub fn get(&self, c: usize) -> LabelState {
        self.states[c]
    }

    pub fn observed_count(&self) -> usize {
        self.states.iter().filter(|s| **s != LabelState::Missing).count()
    }
}

/// Observation mask and dense 0/1 targets. Targets at masked positions are 0
/// and must only ever be used multiplied by the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMask {
    pub mask: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn validate_labels(v: TriStateLabelVector, vocab: &Vocabulary) -> Result<TriStateLabelVector> {
    if v.len() != vocab.size() {
        return Err(Error::LengthMismatch {
            expected: vocab.size(),
            actual: v.len(),
        });
    }
    Ok(v)
}

pub fn observed_mask(v: &TriStateLabelVector) -> ObservedMask {
    let mut mask = Vec::with_capacity(v.len());
    let mut target = Vec::with_capacity(v.len());
    for s in v.states() {
        let (m, t) = match s {
            LabelState::Positive => (1.0, 1.0),
            LabelState::Negative => (1.0, 0.0),
            LabelState::Missing => (0.0, 0.0),
        };
        mask.push(m);
        target.push(t);
    }
    ObservedMask { mask, target }
}

/// Ordered, duplicate-free list of class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidVocabulary("empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidVocabulary(format!("duplicate name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn openmic() -> Self {
        Self::new(OPENMIC_INSTRUMENTS).expect("static vocabulary is valid")
    }

    /// Source vocabulary of anonymous classes `src_000`, `src_001`, ...
    pub fn numbered(prefix: &str, n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("{prefix}_{i:03}")))
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitTag::Train),
            "val" | "validation" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a clip's spectrogram comes from.
#[derive(Debug, Clone)]
pub enum SpectrogramRef {
    InMemory(Arc<Spectrogram>),
    /// Audio file; the spectrogram is computed by the frontend and cached.
    Audio(PathBuf),
    /// Precomputed spectrogram in the parameter-block container format.
    Cached(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub clip_id: String,
    pub spectrogram: SpectrogramRef,
    pub labels: TriStateLabelVector,
    pub split: SplitTag,
}
