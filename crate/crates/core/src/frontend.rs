//! Waveform to fixed-size log-mel spectrogram.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::datamodel::Spectrogram;
use crate::error::{Error, Result};

/// Energy floor applied before the logarithm.
pub const LOG_EPSILON: f64 = 1e-10;

/// `ln(LOG_EPSILON)`: the value of silent bins and of padding frames.
pub fn log_floor() -> f64 {
    LOG_EPSILON.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendParams {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub target_frames: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for FrontendParams {
    fn default() -> Self {
        Self {
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            target_frames: 1024,
            norm_mean: 0.0,
            norm_std: 1.0,
        }
    }
}

impl FrontendParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::InvalidFrontend("n_mels must be positive".into()));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) {
            return Err(Error::InvalidFrontend(format!(
                "need 0 < hop_ms <= win_ms, got hop {} win {}",
                self.hop_ms, self.win_ms
            )));
        }
        if self.target_frames == 0 {
            return Err(Error::InvalidFrontend("target_frames must be positive".into()));
        }
        if !(self.norm_std > 0.0 && self.norm_std.is_finite()) {
            return Err(Error::ZeroStd(self.norm_std));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centers evenly spaced on the mel scale between
/// 0 Hz and Nyquist. Returns `n_mels` rows of `n_fft / 2 + 1` weights.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Center frequency in Hz of mel band `m`.
pub fn mel_band_center(m: usize, n_mels: usize, sample_rate: f64) -> f64 {
    let mel_max = hz_to_mel(sample_rate / 2.0);
    mel_to_hz(mel_max * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Symmetric von-Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Reusable analysis state for one sample rate: window, FFT plan and filterbank.
pub struct LogMelFrontend {
    params: FrontendParams,
    win_len: usize,
    hop_len: usize,
    n_fft: usize,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelFrontend {
    pub fn new(params: FrontendParams, sample_rate: u32) -> Result<Self> {
        params.validate()?;
        if sample_rate == 0 {
            return Err(Error::InvalidFrontend("sample rate must be positive".into()));
        }
        let sr = sample_rate as f64;
        let win_len = ((params.win_ms * sr / 1000.0).round() as usize).max(1);
        let hop_len = ((params.hop_ms * sr / 1000.0).round() as usize).max(1);
        let n_fft = win_len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            window: hann_window(win_len),
            filters: mel_filterbank(params.n_mels, n_fft, sr),
            params,
            win_len,
            hop_len,
            n_fft,
            fft,
        })
    }

    pub fn hop_len(&self) -> usize {
        self.hop_len
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Number of frames for `len` samples: one per full hop, at least one.
    pub fn frame_count(&self, len: usize) -> usize {
        (len / self.hop_len).max(1)
    }

    pub fn compute(&self, waveform: &[f64]) -> Result<Spectrogram> {
        if waveform.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if waveform.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteSamples);
        }
        let frames = self.frame_count(waveform.len());
        let n_mels = self.params.n_mels;
        let n_bins = self.n_fft / 2 + 1;
        let mut values = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..frames {
            let start = t * self.hop_len;
            for (i, slot) in buf.iter_mut().enumerate() {
                let sample = if i < self.win_len {
                    waveform.get(start + i).copied().unwrap_or(0.0) * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(sample, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filter in &self.filters {
                let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push(energy.max(LOG_EPSILON).ln());
            }
        }
        Ok(Spectrogram::from_parts_unchecked(
            values,
            frames,
            n_mels,
            self.params.hop_ms,
        ))
    }
}

pub fn compute_logmel(waveform: &[f64], sample_rate: u32, p: &FrontendParams) -> Result<Spectrogram> {
    LogMelFrontend::new(p.clone(), sample_rate)?.compute(waveform)
}

/// Pads with floor-valued frames or truncates to exactly `target_frames`.
pub fn fit_to_length(s: &Spectrogram, target_frames: usize) -> Spectrogram {
    let f = s.n_mels();
    let mut values = s.values()[..s.frames().min(target_frames) * f].to_vec();
    values.resize(target_frames * f, log_floor());
    Spectrogram::from_parts_unchecked(values, target_frames, f, s.frame_hop_ms())
}

pub fn normalize(s: &Spectrogram, mean: f64, std: f64) -> Result<Spectrogram> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::ZeroStd(std));
    }
    let values = s.values().iter().map(|x| (x - mean) / std).collect();
    Ok(Spectrogram::from_parts_unchecked(
        values,
        s.frames(),
        s.n_mels(),
        s.frame_hop_ms(),
    ))
}

pub fn denormalize(s: &Spectrogram, mean: f64, std: f64) -> Result<Spectrogram> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::ZeroStd(std));
    }
    let values = s.values().iter().map(|x| x * std + mean).collect();
    Ok(Spectrogram::from_parts_unchecked(
        values,
        s.frames(),
        s.n_mels(),
        s.frame_hop_ms(),
    ))
}

/// Full pipeline used for dataset clips: log-mel, fixed length, standardization.
pub fn prepare(waveform: &[f64], sample_rate: u32, p: &FrontendParams) -> Result<Spectrogram> {
    let s = compute_logmel(waveform, sample_rate, p)?;
    normalize(&fit_to_length(&s, p.target_frames), p.norm_mean, p.norm_std)
}

/// Linear-interpolation resampling.
pub fn resample_linear(waveform: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz || waveform.is_empty() {
        return waveform.to_vec();
    }
    let ratio = from_hz as f64 / to_hz as f64;
    let out_len = ((waveform.len() as f64) / ratio).floor().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = waveform[j.min(waveform.len() - 1)];
            let b = waveform[(j + 1).min(waveform.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Decodes an audio file into mono samples and its sample rate.
pub trait AudioDecoder: Send + Sync {
    fn handles(&self, path: &Path) -> bool;
    fn decode(&self, path: &Path) -> Result<(Vec<f64>, u32)>;
}

/// Uncompressed PCM `.wav` reader; multichannel input is averaged to mono.
pub struct WavDecoder;

impl AudioDecoder for WavDecoder {
    fn handles(&self, path: &Path) -> bool {
        path.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
    }

    fn decode(&self, path: &Path) -> Result<(Vec<f64>, u32)> {
        let reader = hound::WavReader::open(path).map_err(|e| Error::DataFormat {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let bad = |e: hound::Error| Error::DataFormat {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?,
            hound::SampleFormat::Int => {
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(bad)?
            }
        };
        let mono = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect();
        Ok((mono, spec.sample_rate))
    }
}

/// Tries each decoder in turn; compressed formats need a registered decoder.
pub fn decode_audio(path: &Path, decoders: &[Box<dyn AudioDecoder>]) -> Result<(Vec<f64>, u32)> {
    decoders
        .iter()
        .find(|d| d.handles(path))
        .ok_or_else(|| Error::UnsupportedAudio(path.to_path_buf()))?
        .decode(path)
}
