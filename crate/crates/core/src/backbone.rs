//! Frozen black-box scorers. Backbones are only ever reached through `&self`,
//! and their parameters are covered by a SHA-256 fingerprint so any change is
//! detectable.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::datamodel::{Spectrogram, AUDIOSET_CLASSES};
use crate::error::{Error, Result};
use crate::nn::dot;
use crate::rng::Lcg64;

/// Checksum over all internal parameters of a backbone.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes =
            hex::decode(s.trim()).map_err(|e| Error::CheckpointCorrupt(format!("bad fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::CheckpointCorrupt("fingerprint must be 32 bytes".into()))?;
        Ok(Fingerprint(arr))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// A pretrained scorer whose parameters never change. Scores are
/// pre-activation; label mappers apply their own squashing.
pub trait FrozenBackbone: Send + Sync {
    fn input_dims(&self) -> (usize, usize);

    fn k_src(&self) -> usize;

    fn score(&self, x: &Spectrogram) -> Result<Vec<f64>>;

    /// Gradient of `<upstream, score(x)>` with respect to `x`. Never produces
    /// or applies a parameter gradient.
    fn backprop_input(&self, x: &Spectrogram, upstream: &[f64]) -> Result<Vec<f64>>;

    fn fingerprint(&self) -> Fingerprint;

    fn describe(&self) -> String;

    fn check_input(&self, x: &Spectrogram) -> Result<()> {
        if x.dims() != self.input_dims() {
            return Err(Error::shape(self.input_dims(), x.dims()));
        }
        Ok(())
    }
}

/// Construction parameters of the toy backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackboneSpec {
    pub seed: u64,
    pub dims: (usize, usize),
    pub k_src: usize,
    /// Side of the square pooling tiles.
    pub patch: usize,
    /// Scale of the projection from pooled patches to hidden units.
    pub input_gain: f64,
    /// Scale of the hidden biases; larger values push units into saturation.
    pub bias_scale: f64,
    /// Input level the projection is centred on: a constant spectrogram at
    /// this level reaches the hidden units as their bias alone.
    pub reference_level: f64,
    /// Multiplies the mixing layer, and so the scale of the scores.
    pub output_scale: f64,
}

impl ToyBackboneSpec {
    pub fn new(seed: u64, dims: (usize, usize), k_src: usize) -> Self {
        Self {
            seed,
            dims,
            k_src,
            patch: 16,
            input_gain: ToyBackbone::DEFAULT_INPUT_GAIN,
            bias_scale: ToyBackbone::DEFAULT_BIAS_SCALE,
            reference_level: 0.0,
            output_scale: 1.0,
        }
    }
}

/// Deterministic desk-scale stand-in for a pretrained audio classifier:
/// 16x16 patch averages, a fixed random affine projection with tanh, and a
/// fixed random linear mixing to `k_src` scores.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    spec: ToyBackboneSpec,
    tiles: (usize, usize),
    /// `k_src x n_patches`, row-major.
    projection: Vec<f64>,
    projection_bias: Vec<f64>,
    /// `k_src x k_src`, row-major.
    mixing: Vec<f64>,
    mixing_bias: Vec<f64>,
}

impl ToyBackbone {
    pub const DEFAULT_INPUT_GAIN: f64 = 1.0;
    pub const DEFAULT_BIAS_SCALE: f64 = 1.0;

    pub fn new(spec: ToyBackboneSpec) -> Result<Self> {
        let (t, f) = spec.dims;
        if t == 0 || f == 0 || spec.k_src == 0 || spec.patch == 0 {
            return Err(Error::BadDims(format!(
                "toy backbone needs positive dims, got {t}x{f}, k_src {}",
                spec.k_src
            )));
        }
        let tiles = (t.div_ceil(spec.patch), f.div_ceil(spec.patch));
        let n_patches = tiles.0 * tiles.1;
        let k = spec.k_src;
        let mut rng = Lcg64::new(spec.seed);
        let proj_scale = spec.input_gain / (n_patches as f64).sqrt();
        let projection: Vec<f64> = (0..k * n_patches).map(|_| rng.normal() * proj_scale).collect();
        let projection_bias = projection
            .chunks_exact(n_patches)
            .map(|row| rng.normal() * spec.bias_scale - spec.reference_level * row.iter().sum::<f64>())
            .collect();
        let mix_scale = spec.output_scale / (k as f64).sqrt();
        let mixing = (0..k * k).map(|_| rng.normal() * mix_scale).collect();
        let mixing_bias = (0..k).map(|_| rng.normal() * 0.1 * spec.output_scale).collect();
        Ok(Self {
            spec,
            tiles,
            projection,
            projection_bias,
            mixing,
            mixing_bias,
        })
    }

    pub fn spec(&self) -> &ToyBackboneSpec {
        &self.spec
    }

    pub fn n_patches(&self) -> usize {
        self.tiles.0 * self.tiles.1
    }

    fn tile_extent(&self, tile: usize, axis_len: usize) -> (usize, usize) {
        let lo = tile * self.spec.patch;
        (lo, (lo + self.spec.patch).min(axis_len))
    }

    fn pool(&self, x: &Spectrogram) -> Vec<f64> {
        let (t, f) = self.spec.dims;
        let mut pooled = vec![0.0; self.n_patches()];
        for ty in 0..self.tiles.0 {
            let (r0, r1) = self.tile_extent(ty, t);
            for tx in 0..self.tiles.1 {
                let (c0, c1) = self.tile_extent(tx, f);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += x.row(r)[c0..c1].iter().sum::<f64>();
                }
                pooled[ty * self.tiles.1 + tx] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
        pooled
    }

    fn hidden(&self, pooled: &[f64]) -> Vec<f64> {
        let p = pooled.len();
        self.projection
            .chunks_exact(p)
            .zip(&self.projection_bias)
            .map(|(row, b)| (dot(row, pooled) + b).tanh())
            .collect()
    }
}

impl FrozenBackbone for ToyBackbone {
    fn input_dims(&self) -> (usize, usize) {
        self.spec.dims
    }

    fn k_src(&self) -> usize {
        self.spec.k_src
    }

    fn score(&self, x: &Spectrogram) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let hidden = self.hidden(&self.pool(x));
        Ok(self
            .mixing
            .chunks_exact(self.spec.k_src)
            .zip(&self.mixing_bias)
            .map(|(row, b)| dot(row, &hidden) + b)
            .collect())
    }

    fn backprop_input(&self, x: &Spectrogram, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let k = self.spec.k_src;
        if upstream.len() != k {
            return Err(Error::shape(k, upstream.len()));
        }
        let pooled = self.pool(x);
        let hidden = self.hidden(&pooled);
        let mut d_hidden = vec![0.0; k];
        for (row, u) in self.mixing.chunks_exact(k).zip(upstream) {
            if *u == 0.0 {
                continue;
            }
            for (d, w) in d_hidden.iter_mut().zip(row) {
                *d += u * w;
            }
        }
        let n_p = pooled.len();
        let mut d_pooled = vec![0.0; n_p];
        for ((row, dh), h) in self.projection.chunks_exact(n_p).zip(&d_hidden).zip(&hidden) {
            let d_pre = dh * (1.0 - h * h);
            if d_pre == 0.0 {
                continue;
            }
            for (d, w) in d_pooled.iter_mut().zip(row) {
                *d += d_pre * w;
            }
        }
        let (t, f) = self.spec.dims;
        let mut grad = vec![0.0; t * f];
        for ty in 0..self.tiles.0 {
            let (r0, r1) = self.tile_extent(ty, t);
            for tx in 0..self.tiles.1 {
                let (c0, c1) = self.tile_extent(tx, f);
                let g = d_pooled[ty * self.tiles.1 + tx] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    grad[r * f + c0..r * f + c1].fill(g);
                }
            }
        }
        Ok(grad)
    }

    fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(b"toy-backbone/v1");
        for v in [
            self.spec.dims.0 as u64,
            self.spec.dims.1 as u64,
            self.spec.k_src as u64,
            self.spec.patch as u64,
        ] {
            h.update(v.to_le_bytes());
        }
        for block in [
            &self.projection,
            &self.projection_bias,
            &self.mixing,
            &self.mixing_bias,
        ] {
            for v in block.iter() {
                h.update(v.to_le_bytes());
            }
        }
        Fingerprint(h.finalize().into())
    }

    fn describe(&self) -> String {
        format!(
            "toy(seed={}, dims={}x{}, k_src={})",
            self.spec.seed, self.spec.dims.0, self.spec.dims.1, self.spec.k_src
        )
    }
}

/// Numerical engine behind [`AstAdapter`], supplied by the embedding
/// application (for example a binding to an inference runtime).
pub trait ExternalEngine: Send + Sync {
    fn score(&self, x: &Spectrogram) -> Result<Vec<f64>>;
    fn input_gradient(&self, x: &Spectrogram, upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Boundary to an externally provided pretrained Audio Spectrogram
/// Transformer. The weights file must exist at construction; without a
/// registered engine every scoring call fails with `WeightsUnavailable`.
pub struct AstAdapter {
    locator: PathBuf,
    fingerprint: Fingerprint,
    engine: Option<Box<dyn ExternalEngine>>,
}

impl AstAdapter {
    pub const INPUT_DIMS: (usize, usize) = (1024, 128);

    pub fn open(locator: &Path) -> Result<Self> {
        let bytes = std::fs::read(locator)
            .map_err(|e| Error::WeightsUnavailable(format!("{}: {e}", locator.display())))?;
        let mut h = Sha256::new();
        h.update(b"ast-weights/v1");
        h.update(&bytes);
        Ok(Self {
            locator: locator.to_path_buf(),
            fingerprint: Fingerprint(h.finalize().into()),
            engine: None,
        })
    }

    pub fn with_engine(mut self, engine: Box<dyn ExternalEngine>) -> Self {
        self.engine = Some(engine);
        self
    }

    fn engine(&self) -> Result<&dyn ExternalEngine> {
        self.engine.as_deref().ok_or_else(|| {
            Error::WeightsUnavailable(format!(
                "no inference engine registered for {}",
                self.locator.display()
            ))
        })
    }
}

impl FrozenBackbone for AstAdapter {
    fn input_dims(&self) -> (usize, usize) {
        Self::INPUT_DIMS
    }

    fn k_src(&self) -> usize {
        AUDIOSET_CLASSES
    }

    fn score(&self, x: &Spectrogram) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.engine()?.score(x)
    }

    fn backprop_input(&self, x: &Spectrogram, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.engine()?.input_gradient(x, upstream)
    }

    fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    fn describe(&self) -> String {
        format!("ast({})", self.locator.display())
    }
}
