//! Dataset loading (OpenMIC layout), validation splitting, spectrogram
//! caching and the planted-pattern synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::datamodel::{
    ClipRecord, LabelState, Spectrogram, SpectrogramRef, SplitTag, TriStateLabelVector, Vocabulary,
};
use crate::error::{Error, Result};
use crate::frontend::{self, AudioDecoder, FrontendParams, WavDecoder};
use crate::nn::Param;
use crate::rng::Lcg64;

pub const DEFAULT_POS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
/// Rate audio is resampled to before the frontend runs.
/// Synthetic classes are named `class0`, `class1`, ...
pub const SYNTHETIC_CLASS_PREFIX: &str = "class";

pub const FRONTEND_SAMPLE_RATE: u32 = 16_000;
const AUDIO_EXTENSIONS: [&str; 3] = ["wav", "ogg", "flac"];
const SPECTROGRAM_KIND: &str = "spectrogram";

/// File locations of an OpenMIC-style dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenMicLayout {
    pub root: PathBuf,
    pub labels: PathBuf,
    pub train_split: PathBuf,
    pub test_split: PathBuf,
    /// Audio lives under `audio/<first three key characters>/<key>.<ext>`.
    pub audio_dir: PathBuf,
    /// Optional precomputed spectrograms, `<key>.rpk`.
    pub spectrogram_dir: PathBuf,
}

impl OpenMicLayout {
    /// Standard file names of the public OpenMIC-2018 release.
    pub fn standard(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            labels: root.join("openmic-2018-aggregated-labels.csv"),
            train_split: root.join("partitions").join("split01_train.csv"),
            test_split: root.join("partitions").join("split01_test.csv"),
            audio_dir: root.join("audio"),
            spectrogram_dir: root.join("spectrograms"),
            root,
        }
    }

    fn resolve(&self, key: &str) -> Option<SpectrogramRef> {
        let cached = self.spectrogram_dir.join(format!("{key}.rpk"));
        if cached.is_file() {
            return Some(SpectrogramRef::Cached(cached));
        }
        let shard = self.audio_dir.join(key.get(..3).unwrap_or(key));
        AUDIO_EXTENSIONS.iter().find_map(|ext| {
            [
                shard.join(format!("{key}.{ext}")),
                self.audio_dir.join(format!("{key}.{ext}")),
            ]
            .into_iter()
            .find(|p| p.is_file())
            .map(SpectrogramRef::Audio)
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_split_keys(path: &Path) -> Result<Vec<String>> {
    if !path.is_file() {
        return Err(Error::MissingSplitFile(path.to_path_buf()));
    }
    Ok(read_text(path)?
        .lines()
        .map(|l| l.split(',').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn data_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        message: format!("line {line}: {}", message.into()),
    }
}

/// Loads records sorted by sample key. Pairs present in the label table
/// become POSITIVE (relevance >= `pos_threshold`) or NEGATIVE; absent pairs
/// are MISSING.
pub fn load_openmic(
    layout: &OpenMicLayout,
    vocab: &Vocabulary,
    pos_threshold: f64,
) -> Result<Vec<ClipRecord>> {
    if !(0.0..=1.0).contains(&pos_threshold) {
        return Err(Error::BadThreshold(pos_threshold));
    }
    let train = read_split_keys(&layout.train_split)?;
    let test = read_split_keys(&layout.test_split)?;
    let mut splits: BTreeMap<String, SplitTag> = BTreeMap::new();
    for (keys, tag) in [(train, SplitTag::Train), (test, SplitTag::Test)] {
        for k in keys {
            if splits.insert(k.clone(), tag).is_some() {
                return Err(Error::DataFormat {
                    path: layout.root.clone(),
                    message: format!("sample key `{k}` listed in more than one split"),
                });
            }
        }
    }

    let mut states: BTreeMap<String, Vec<LabelState>> = splits
        .keys()
        .map(|k| (k.clone(), vec![LabelState::Missing; vocab.size()]))
        .collect();
    let text = read_text(&layout.labels)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header))
            if header.trim().split(',').map(str::trim).take(3).eq([
                "sample_key",
                "instrument",
                "relevance",
            ]) => {}
        _ => {
            return Err(data_error(
                &layout.labels,
                1,
                "expected header `sample_key,instrument,relevance`",
            ))
        }
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(data_error(&layout.labels, i + 1, "expected three fields"));
        }
        let c = vocab
            .index_of(fields[1])
            .ok_or_else(|| Error::UnknownInstrument(fields[1].to_string()))?;
        let relevance: f64 = fields[2]
            .parse()
            .map_err(|_| data_error(&layout.labels, i + 1, "relevance is not a number"))?;
        if !(0.0..=1.0).contains(&relevance) {
            return Err(data_error(&layout.labels, i + 1, "relevance outside [0, 1]"));
        }
        // Label rows for keys outside both splits are ignored.
        if let Some(row) = states.get_mut(fields[0]) {
            row[c] = if relevance >= pos_threshold {
                LabelState::Positive
            } else {
                LabelState::Negative
            };
        }
    }

    states
        .into_iter()
        .map(|(key, row)| {
            let spectrogram = layout
                .resolve(&key)
                .ok_or_else(|| Error::UnresolvedAudio(key.clone()))?;
            Ok(ClipRecord {
                split: splits[&key],
                clip_id: key,
                spectrogram,
                labels: TriStateLabelVector::new(row),
            })
        })
        .collect()
}

/// Retags exactly `floor(fraction * |TRAIN|)` training records as VAL,
/// sampled uniformly without replacement.
pub fn make_validation_split(
    mut records: Vec<ClipRecord>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ClipRecord>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let mut train: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == SplitTag::Train)
        .map(|(i, _)| i)
        .collect();
    let n_val = (fraction * train.len() as f64).floor() as usize;
    Lcg64::derive(seed, "validation-split").shuffle(&mut train);
    for &i in &train[..n_val] {
        records[i].split = SplitTag::Val;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassStats {
    pub positives: usize,
    pub negatives: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    pub per_class: Vec<ClassStats>,
    pub n_records: usize,
    pub n_classes: usize,
}

impl LabelStats {
    pub fn observed(&self) -> usize {
        self.per_class.iter().map(|c| c.positives + c.negatives).sum()
    }

    pub fn missing(&self) -> usize {
        self.per_class.iter().map(|c| c.missing).sum()
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.observed() as f64 / (self.n_records * self.n_classes) as f64
    }
}

pub fn label_stats(records: &[ClipRecord]) -> Result<LabelStats> {
    let first = records.first().ok_or(Error::EmptySplit("dataset"))?;
    let n_classes = first.labels.len();
    let mut per_class = vec![ClassStats::default(); n_classes];
    for r in records {
        if r.labels.len() != n_classes {
            return Err(Error::LengthMismatch {
                expected: n_classes,
                actual: r.labels.len(),
            });
        }
        for (s, st) in r.labels.states().iter().zip(per_class.iter_mut()) {
            match s {
                LabelState::Positive => st.positives += 1,
                LabelState::Negative => st.negatives += 1,
                LabelState::Missing => st.missing += 1,
            }
        }
    }
    Ok(LabelStats {
        per_class,
        n_records: records.len(),
        n_classes,
    })
}

pub fn write_spectrogram(path: &Path, s: &Spectrogram) -> Result<()> {
    let mut c = Container::new(SPECTROGRAM_KIND);
    c.meta
        .push(("frame_hop_ms".into(), format!("{}", s.frame_hop_ms())));
    c.blocks.push(Param {
        name: "values".into(),
        shape: vec![s.frames(), s.n_mels()],
        data: s.values().to_vec(),
    });
    c.save(path)
}

pub fn read_spectrogram(path: &Path) -> Result<Spectrogram> {
    let c = Container::load(path)?;
    let corrupt = |m: &str| Error::CheckpointCorrupt(format!("{}: {m}", path.display()));
    if c.kind != SPECTROGRAM_KIND {
        return Err(corrupt("not a spectrogram file"));
    }
    let hop: f64 = c
        .require_meta("frame_hop_ms")?
        .parse()
        .map_err(|_| corrupt("bad frame_hop_ms"))?;
    let block = c.block("values").ok_or_else(|| corrupt("missing values block"))?;
    if block.shape.len() != 2 {
        return Err(corrupt("values block must be a matrix"));
    }
    Spectrogram::new(block.data.clone(), block.shape[0], block.shape[1], hop)
}

/// Short stable hash of the frontend settings; names the cache directory.
pub fn frontend_hash(p: &FrontendParams) -> String {
    let text = format!(
        "n_mels={}\nwin_ms={}\nhop_ms={}\ntarget_frames={}\nnorm_mean={}\nnorm_std={}\nsample_rate={}\n",
        p.n_mels, p.win_ms, p.hop_ms, p.target_frames, p.norm_mean, p.norm_std, FRONTEND_SAMPLE_RATE
    );
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Records plus everything needed to materialize their spectrograms.
pub struct Dataset {
    pub vocab: Vocabulary,
    pub records: Vec<ClipRecord>,
    frontend: FrontendParams,
    cache_dir: Option<PathBuf>,
    decoders: Vec<Box<dyn AudioDecoder>>,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, records: Vec<ClipRecord>, frontend: FrontendParams) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::DataFormat {
                    path: PathBuf::new(),
                    message: format!("duplicate clip id `{}`", r.clip_id),
                });
            }
            if r.labels.len() != vocab.size() {
                return Err(Error::LengthMismatch {
                    expected: vocab.size(),
                    actual: r.labels.len(),
                });
            }
        }
        Ok(Self {
            vocab,
            records,
            frontend,
            cache_dir: None,
            decoders: vec![Box::new(WavDecoder)],
        })
    }

    /// Spectrograms computed from audio are stored under `dir/<frontend hash>/`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into().join(frontend_hash(&self.frontend)));
        self
    }

    pub fn with_decoder(mut self, decoder: Box<dyn AudioDecoder>) -> Self {
        self.decoders.push(decoder);
        self
    }

    pub fn frontend(&self) -> &FrontendParams {
        &self.frontend
    }

    pub fn indices(&self, split: SplitTag) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn spectrogram(&self, i: usize) -> Result<Arc<Spectrogram>> {
        let r = &self.records[i];
        match &r.spectrogram {
            SpectrogramRef::InMemory(s) => Ok(Arc::clone(s)),
            SpectrogramRef::Cached(p) => read_spectrogram(p).map(Arc::new),
            SpectrogramRef::Audio(p) => self.decode_clip(&r.clip_id, p).map(Arc::new),
        }
    }

    fn decode_clip(&self, key: &str, path: &Path) -> Result<Spectrogram> {
        let cached = self.cache_dir.as_ref().map(|d| d.join(format!("{key}.rpk")));
        if let Some(c) = cached.as_ref().filter(|c| c.is_file()) {
            return read_spectrogram(c);
        }
        let (wave, sr) = frontend::decode_audio(path, &self.decoders)?;
        let wave = frontend::resample_linear(&wave, sr, FRONTEND_SAMPLE_RATE);
        let s = frontend::prepare(&wave, FRONTEND_SAMPLE_RATE, &self.frontend)?;
        // Values go through single precision so cached and fresh reads agree.
        let s = s.with_values(s.values().iter().map(|v| *v as f32 as f64).collect())?;
        if let Some(c) = cached {
            if let Some(dir) = c.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_spectrogram(&c, &s)?;
        }
        Ok(s)
    }
}

/// Planted-pattern synthetic task. Class `c` owns the `c`-th of
/// `n_classes` equal mel bands; a positive clip carries that class's
/// rectangular blob at a random time offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub n_classes: usize,
    pub dims: (usize, usize),
    pub positive_rate: f64,
    pub missing_rate: f64,
    pub label_noise: f64,
    pub test_fraction: f64,
    pub blob_frames: usize,
    pub blob_bins: usize,
    pub blob_gain: f64,
    pub noise_std: f64,
    /// Per-clip, per-band level offset standard deviation.
    pub band_offset_std: f64,
    /// Probability that a band carries a label-independent distractor streak.
    pub distractor_rate: f64,
    pub distractor_frames: usize,
    pub distractor_bins: usize,
    pub distractor_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            n_classes: 4,
            dims: (128, 128),
            positive_rate: 0.5,
            missing_rate: 0.5,
            label_noise: 0.0,
            test_fraction: 0.25,
            blob_frames: 12,
            blob_bins: 12,
            blob_gain: 2.0,
            noise_std: 1.0,
            band_offset_std: 0.0,
            distractor_rate: 0.0,
            distractor_frames: 36,
            distractor_bins: 4,
            distractor_gain: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn band_width(&self) -> usize {
        self.dims.1 / self.n_classes
    }

    /// First mel bin of class `c`'s blob (centred in its band).
    pub fn blob_bin(&self, c: usize) -> usize {
        c * self.band_width() + (self.band_width() - self.blob_bins) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.dims;
        let bad = |key: &str, msg: String| Err(Error::config(format!("synthetic.{key}"), msg));
        if self.n_clips == 0 {
            return bad("n_clips", "must be positive".into());
        }
        if self.n_classes == 0 || f < self.n_classes {
            return bad("n_classes", format!("must be in 1..={f}"));
        }
        if t == 0 || f == 0 || t % 8 != 0 || f % 8 != 0 {
            return Err(Error::BadDims(format!(
                "synthetic dims {t}x{f} must be positive multiples of 8"
            )));
        }
        for (key, v) in [
            ("positive_rate", self.positive_rate),
            ("missing_rate", self.missing_rate),
            ("label_noise", self.label_noise),
            ("test_fraction", self.test_fraction),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("{v} outside [0, 1]"));
            }
        }
        if self.blob_frames == 0 || self.blob_frames > t {
            return bad("blob_frames", format!("must be in 1..={t}"));
        }
        if self.blob_bins == 0 || self.blob_bins > self.band_width() {
            return bad("blob_bins", format!("must be in 1..={}", self.band_width()));
        }
        // Streak geometry only matters when streaks are drawn.
        if self.distractor_rate > 0.0 {
            if self.distractor_frames == 0 || self.distractor_frames > t {
                return bad("distractor_frames", format!("must be in 1..={t}"));
            }
            if self.distractor_bins == 0 || self.distractor_bins > self.band_width() {
                return bad("distractor_bins", format!("must be in 1..={}", self.band_width()));
            }
        }
        for (key, v) in [
            ("blob_gain", self.blob_gain),
            ("noise_std", self.noise_std),
            ("band_offset_std", self.band_offset_std),
            ("distractor_gain", self.distractor_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn add_rect(values: &mut [f64], f: usize, t0: usize, frames: usize, b0: usize, bins: usize, v: f64) {
    for t in t0..t0 + frames {
        for x in &mut values[t * f + b0..t * f + b0 + bins] {
            *x += v;
        }
    }
}

/// Generates the synthetic records. `TEST` takes `round(test_fraction * n)`
/// clips; everything else is `TRAIN`. Bitwise reproducible for equal specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vocabulary, Vec<ClipRecord>)> {
    spec.validate()?;
    let (t, f) = spec.dims;
    let vocab = Vocabulary::numbered(SYNTHETIC_CLASS_PREFIX, spec.n_classes)?;
    let mut content = Lcg64::derive(spec.seed, "synthetic-content");
    let mut labels_rng = Lcg64::derive(spec.seed, "synthetic-labels");
    let mut order: Vec<usize> = (0..spec.n_clips).collect();
    Lcg64::derive(spec.seed, "synthetic-split").shuffle(&mut order);
    let n_test = (spec.test_fraction * spec.n_clips as f64).round() as usize;
    let mut is_test = vec![false; spec.n_clips];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let band = spec.band_width();

    let mut records = Vec::with_capacity(spec.n_clips);
    for (i, test) in is_test.into_iter().enumerate() {
        let mut values: Vec<f64> = (0..t * f).map(|_| content.normal() * spec.noise_std).collect();
        let mut states = Vec::with_capacity(spec.n_classes);
        for c in 0..spec.n_classes {
            let offset = content.normal() * spec.band_offset_std;
            if offset != 0.0 {
                add_rect(&mut values, f, 0, t, c * band, band, offset);
            }
            let positive = content.bernoulli(spec.positive_rate);
            if positive {
                let t0 = content.below(t - spec.blob_frames + 1);
                add_rect(
                    &mut values,
                    f,
                    t0,
                    spec.blob_frames,
                    spec.blob_bin(c),
                    spec.blob_bins,
                    spec.blob_gain,
                );
            }
            if content.bernoulli(spec.distractor_rate) {
                let t0 = content.below(t - spec.distractor_frames + 1);
                let b0 = c * band + content.below(band - spec.distractor_bins + 1);
                add_rect(
                    &mut values,
                    f,
                    t0,
                    spec.distractor_frames,
                    b0,
                    spec.distractor_bins,
                    spec.distractor_gain,
                );
            }
            let observed = positive ^ labels_rng.bernoulli(spec.label_noise);
            let missing = labels_rng.bernoulli(spec.missing_rate);
            states.push(match (missing, observed) {
                (true, _) => LabelState::Missing,
                (false, true) => LabelState::Positive,
                (false, false) => LabelState::Negative,
            });
        }
        let s = Spectrogram::new(values, t, f, FrontendParams::default().hop_ms)?;
        records.push(ClipRecord {
            clip_id: format!("synth-{i:05}"),
            spectrogram: SpectrogramRef::InMemory(Arc::new(s)),
            labels: TriStateLabelVector::new(states),
            split: if test { SplitTag::Test } else { SplitTag::Train },
        });
    }
    Ok((vocab, records))
}

/// Writes records in the OpenMIC layout with precomputed spectrograms, so the
/// result loads through [`load_openmic`]. Relevance is 1.0 for POSITIVE and
/// 0.0 for NEGATIVE; VAL records are listed with TRAIN.
pub fn write_openmic_layout(
    root: &Path,
    vocab: &Vocabulary,
    records: &[ClipRecord],
) -> Result<OpenMicLayout> {
    let layout = OpenMicLayout::standard(root);
    for dir in [&layout.spectrogram_dir, &layout.root.join("partitions")] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut labels = String::from("sample_key,instrument,relevance\n");
    let mut train = String::new();
    let mut test = String::new();
    for r in records {
        let s = match &r.spectrogram {
            SpectrogramRef::InMemory(s) => Arc::clone(s),
            SpectrogramRef::Cached(p) => Arc::new(read_spectrogram(p)?),
            SpectrogramRef::Audio(p) => return Err(Error::UnresolvedAudio(p.display().to_string())),
        };
        write_spectrogram(&layout.spectrogram_dir.join(format!("{}.rpk", r.clip_id)), &s)?;
        for (c, st) in r.labels.states().iter().enumerate() {
            let rel = match st {
                LabelState::Positive => "1.0",
                LabelState::Negative => "0.0",
                LabelState::Missing => continue,
            };
            labels.push_str(&format!("{},{},{rel}\n", r.clip_id, vocab.name(c)));
        }
        let list = if r.split == SplitTag::Test {
            &mut test
        } else {
            &mut train
        };
        list.push_str(&r.clip_id);
        list.push('\n');
    }
    for (path, text) in [
        (&layout.labels, labels),
        (&layout.train_split, train),
        (&layout.test_split, test),
    ] {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let names: String = vocab.names().iter().map(|n| format!("{n}\n")).collect();
    let vocab_path = layout.root.join("classes.txt");
    fs::write(&vocab_path, names).map_err(|e| Error::io(&vocab_path, e))?;
    Ok(layout)
}

/// Class names from `classes.txt` under `root` if present, else OpenMIC's.
pub fn layout_vocabulary(root: &Path) -> Result<Vocabulary> {
    let path = root.join("classes.txt");
    if path.is_file() {
        Vocabulary::new(read_text(&path)?.lines().map(str::trim).filter(|l| !l.is_empty()))
    } else {
        Ok(Vocabulary::openmic())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::macro_f1;
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_clips: 40,
            dims: (32, 32),
            blob_frames: 4,
            blob_bins: 4,
            distractor_frames: 8,
            distractor_bins: 2,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    fn write(path: &Path, text: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, text).unwrap();
    }

    /// Three clips, three instruments, every label state exercised.
    fn fixture() -> (tempfile::TempDir, OpenMicLayout, Vocabulary) {
        let dir = tempfile::tempdir().unwrap();
        let layout = OpenMicLayout::standard(dir.path());
        write(
            &layout.labels,
            "sample_key,instrument,relevance\n\
             000_b,flute,0.9\n\
             000_b,drums,0.2\n\
             000_a,drums,0.5\n\
             001_c,voice,0.49\n\
             001_c,flute,1.0\n",
        );
        write(&layout.train_split, "000_b\n000_a\n");
        write(&layout.test_split, "001_c\n");
        for key in ["000_a", "000_b", "001_c"] {
            write(&layout.audio_dir.join("000").join(format!("{key}.wav")), "");
        }
        let spec_path = layout.spectrogram_dir.join("001_c.rpk");
        fs::create_dir_all(&layout.spectrogram_dir).unwrap();
        write_spectrogram(&spec_path, &Spectrogram::filled(8, 4, 0.5).unwrap()).unwrap();
        let vocab = Vocabulary::new(["drums", "flute", "voice"]).unwrap();
        (dir, layout, vocab)
    }

    #[test]
    fn openmic_fixture_resolves_expected_tri_state_matrix() {
        let (_dir, layout, vocab) = fixture();
        let records = load_openmic(&layout, &vocab, 0.5).unwrap();
        let keys: Vec<_> = records.iter().map(|r| r.clip_id.as_str()).collect();
        assert_eq!(keys, ["000_a", "000_b", "001_c"]);
        let matrix: Vec<String> = records
            .iter()
            .map(|r| {
                r.labels
                    .states()
                    .iter()
                    .map(|s| s.token())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        assert_eq!(matrix, ["POS MISS MISS", "NEG POS MISS", "MISS POS NEG"]);
        let splits: Vec<_> = records.iter().map(|r| r.split).collect();
        assert_eq!(splits, [SplitTag::Train, SplitTag::Train, SplitTag::Test]);
        assert!(matches!(records[0].spectrogram, SpectrogramRef::Audio(_)));
        assert!(matches!(records[2].spectrogram, SpectrogramRef::Cached(_)));

        let stats = label_stats(&records).unwrap();
        assert_eq!(stats.observed(), 5);
        assert_eq!(stats.missing(), 4);
        assert_eq!(
            stats.per_class,
            vec![
                ClassStats {
                    positives: 1,
                    negatives: 1,
                    missing: 1
                },
                ClassStats {
                    positives: 2,
                    negatives: 0,
                    missing: 1
                },
                ClassStats {
                    positives: 0,
                    negatives: 1,
                    missing: 2
                },
            ]
        );
    }

    #[test]
    fn openmic_errors() {
        let (_dir, layout, vocab) = fixture();
        let mut missing_split = layout.clone();
        missing_split.test_split = layout.root.join("nope.csv");
        assert!(matches!(
            load_openmic(&missing_split, &vocab, 0.5),
            Err(Error::MissingSplitFile(_))
        ));
        let narrow = Vocabulary::new(["drums", "flute"]).unwrap();
        assert!(matches!(
            load_openmic(&layout, &narrow, 0.5),
            Err(Error::UnknownInstrument(name)) if name == "voice"
        ));
        fs::remove_file(layout.audio_dir.join("000").join("000_a.wav")).unwrap();
        assert!(matches!(
            load_openmic(&layout, &vocab, 0.5),
            Err(Error::UnresolvedAudio(k)) if k == "000_a"
        ));
    }

    fn plain_records(n: usize) -> Vec<ClipRecord> {
        let s = Arc::new(Spectrogram::filled(1, 1, 0.0).unwrap());
        (0..n)
            .map(|i| ClipRecord {
                clip_id: format!("{i}"),
                spectrogram: SpectrogramRef::InMemory(Arc::clone(&s)),
                labels: TriStateLabelVector::all(LabelState::Missing, 1),
                split: if i % 5 == 4 {
                    SplitTag::Test
                } else {
                    SplitTag::Train
                },
            })
            .collect()
    }

    #[test]
    fn validation_split_counts_and_determinism() {
        let records: Vec<_> = plain_records(125);
        let a = make_validation_split(records.clone(), 0.15, 9).unwrap();
        let count = |rs: &[ClipRecord], tag| rs.iter().filter(|r| r.split == tag).count();
        assert_eq!(count(&a, SplitTag::Val), 15);
        assert_eq!(count(&a, SplitTag::Train), 85);
        assert_eq!(count(&a, SplitTag::Test), 25);
        let b = make_validation_split(records.clone(), 0.15, 9).unwrap();
        let tags = |rs: &[ClipRecord]| rs.iter().map(|r| r.split).collect::<Vec<_>>();
        assert_eq!(tags(&a), tags(&b));
        for (before, after) in records.iter().zip(&a) {
            if before.split == SplitTag::Test {
                assert_eq!(after.split, SplitTag::Test);
            }
        }
        assert!(matches!(
            make_validation_split(records.clone(), 0.0, 9),
            Err(Error::FractionOutOfRange(_))
        ));
        assert!(make_validation_split(records, 1.0, 9).is_err());
    }

    #[test]
    fn all_missing_stats() {
        let stats = label_stats(&plain_records(7)).unwrap();
        assert_eq!(
            stats.per_class,
            vec![ClassStats {
                positives: 0,
                negatives: 0,
                missing: 7
            }]
        );
        assert_eq!(stats.missing_fraction(), 1.0);
        assert!(label_stats(&[]).is_err());
    }

    #[test]
    fn synthetic_without_missing_observes_everything() {
        let spec = SyntheticSpec {
            missing_rate: 0.0,
            ..small_spec()
        };
        let (_, records) = generate_synthetic(&spec).unwrap();
        assert!(records
            .iter()
            .all(|r| r.labels.observed_count() == spec.n_classes));
        assert_eq!(records.iter().filter(|r| r.split == SplitTag::Test).count(), 10);
    }

    #[test]
    fn synthetic_missing_fraction_matches_binomial_expectation() {
        let spec = SyntheticSpec {
            n_clips: 2000,
            dims: (16, 16),
            blob_frames: 2,
            blob_bins: 2,
            distractor_frames: 2,
            distractor_bins: 2,
            ..SyntheticSpec::default()
        };
        let (_, records) = generate_synthetic(&spec).unwrap();
        let stats = label_stats(&records).unwrap();
        let observed = stats.observed() as f64 / (2000.0 * 4.0);
        assert!((observed - 0.5).abs() <= 0.02, "observed fraction {observed}");
    }

    #[test]
    fn synthetic_is_bitwise_reproducible() {
        let (_, a) = generate_synthetic(&small_spec()).unwrap();
        let (_, b) = generate_synthetic(&small_spec()).unwrap();
        let (_, c) = generate_synthetic(&SyntheticSpec {
            seed: 6,
            ..small_spec()
        })
        .unwrap();
        let dump = |rs: &[ClipRecord]| {
            rs.iter()
                .map(|r| match &r.spectrogram {
                    SpectrogramRef::InMemory(s) => (
                        r.labels.clone(),
                        r.split,
                        s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    ),
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a), dump(&c));
    }

    /// Thresholds the peak blob-sized window energy inside each class band.
    fn band_energy_classifier(spec: &SyntheticSpec, s: &Spectrogram) -> Vec<u8> {
        let (t, _) = spec.dims;
        (0..spec.n_classes)
            .map(|c| {
                let b0 = spec.blob_bin(c);
                let peak = (0..=t - spec.blob_frames)
                    .map(|t0| {
                        let mut e = 0.0;
                        for r in t0..t0 + spec.blob_frames {
                            e += s.row(r)[b0..b0 + spec.blob_bins].iter().sum::<f64>();
                        }
                        e / (spec.blob_frames * spec.blob_bins) as f64
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                u8::from(peak > spec.blob_gain / 2.0)
            })
            .collect()
    }

    #[test]
    fn planted_patterns_are_learnable_by_band_energy_threshold() {
        let spec = SyntheticSpec {
            n_clips: 300,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let (_, records) = generate_synthetic(&spec).unwrap();
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for r in &records {
            let SpectrogramRef::InMemory(s) = &r.spectrogram else {
                unreachable!()
            };
            preds.push(band_energy_classifier(&spec, s));
            labels.push(r.labels.clone());
        }
        let f1 = macro_f1(&preds, &labels).unwrap().macro_f1;
        assert!(f1 > 0.95, "oracle macro-F1 {f1}");
    }

    #[test]
    fn synthetic_layout_round_trips_through_openmic_loader() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, records) = generate_synthetic(&small_spec()).unwrap();
        let layout = write_openmic_layout(dir.path(), &vocab, &records).unwrap();
        let loaded = load_openmic(&layout, &layout_vocabulary(dir.path()).unwrap(), 0.5).unwrap();
        assert_eq!(loaded.len(), records.len());
        let ds = Dataset::new(vocab, loaded, FrontendParams::default()).unwrap();
        for (i, r) in records.iter().enumerate() {
            assert_eq!(ds.records[i].clip_id, r.clip_id);
            assert_eq!(ds.records[i].labels, r.labels);
            assert_eq!(ds.records[i].split, r.split);
            let SpectrogramRef::InMemory(orig) = &r.spectrogram else {
                unreachable!()
            };
            let back = ds.spectrogram(i).unwrap();
            for (a, b) in orig.values().iter().zip(back.values()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    proptest! {
        #[test]
        fn loader_order_is_stable_under_split_file_order(perm in Just(()).prop_perturb(|_, mut rng| {
            let mut keys = vec!["000_a", "000_b"];
            if rng.next_u32() % 2 == 0 { keys.reverse(); }
            keys
        })) {
            let (_dir, layout, vocab) = fixture();
            fs::write(&layout.train_split, perm.join("\n")).unwrap();
            let ids: Vec<_> = load_openmic(&layout, &vocab, 0.5).unwrap().into_iter().map(|r| r.clip_id).collect();
            prop_assert_eq!(ids, vec!["000_a", "000_b", "001_c"]);
        }

        #[test]
        fn stats_totals_partition_the_label_matrix(seed in 0u64..1000, missing in 0.0f64..1.0) {
            let spec = SyntheticSpec { n_clips: 30, dims: (16, 16), blob_frames: 2, blob_bins: 2,
                distractor_frames: 2, distractor_bins: 2, missing_rate: missing, seed, ..SyntheticSpec::default() };
            let (_, records) = generate_synthetic(&spec).unwrap();
            let stats = label_stats(&records).unwrap();
            for c in &stats.per_class {
                prop_assert_eq!(c.positives + c.negatives + c.missing, 30);
            }
            let split = make_validation_split(records, 0.15, seed).unwrap();
            let mut ids: Vec<_> = split.iter().map(|r| r.clip_id.clone()).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), 30);
        }
    }
}
