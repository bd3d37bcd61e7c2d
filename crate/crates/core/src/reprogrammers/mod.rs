//! Trainable input transforms applied to a spectrogram before the frozen
//! backbone sees it.

mod cnn;
mod noise;
mod unet;

use std::fmt;
use std::str::FromStr;

pub use cnn::CnnReprogrammer;
pub use noise::NoiseReprogrammer;
pub use unet::UnetReprogrammer;

use crate::datamodel::Spectrogram;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::rng::Lcg64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReprogrammerKind {
    Identity,
    Noise,
    Cnn,
    Unet,
}

impl ReprogrammerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReprogrammerKind::Identity => "none",
            ReprogrammerKind::Noise => "noise",
            ReprogrammerKind::Cnn => "cnn",
            ReprogrammerKind::Unet => "unet",
        }
    }
}

impl FromStr for ReprogrammerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(ReprogrammerKind::Identity),
            "noise" => Ok(ReprogrammerKind::Noise),
            "cnn" => Ok(ReprogrammerKind::Cnn),
            "unet" => Ok(ReprogrammerKind::Unet),
            other => Err(Error::config(
                "reprogrammer.kind",
                format!("unknown kind `{other}` (expected none, noise, cnn or unet)"),
            )),
        }
    }
}

impl fmt::Display for ReprogrammerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Construction parameters for any reprogrammer kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprogrammerSpec {
    pub kind: ReprogrammerKind,
    /// `(frames, mel bands)` of the spectrograms the transform accepts.
    pub dims: (usize, usize),
    pub cnn_hidden: usize,
    pub cnn_relu: bool,
    pub unet_widths: [usize; 3],
}

impl ReprogrammerSpec {
    pub fn new(kind: ReprogrammerKind, dims: (usize, usize)) -> Self {
        Self {
            kind,
            dims,
            cnn_hidden: CnnReprogrammer::DEFAULT_HIDDEN,
            cnn_relu: true,
            unet_widths: UnetReprogrammer::DEFAULT_WIDTHS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.dims;
        if t == 0 || f == 0 {
            return Err(Error::BadDims(format!(
                "dimensions must be positive, got {t}x{f}"
            )));
        }
        match self.kind {
            ReprogrammerKind::Unet => {
                if t % 8 != 0 || f % 8 != 0 {
                    return Err(Error::BadDims(format!(
                        "U-Net needs both dimensions divisible by 8, got {t}x{f}"
                    )));
                }
                if self.unet_widths.contains(&0) {
                    return Err(Error::BadDims("U-Net widths must be positive".into()));
                }
            }
            ReprogrammerKind::Cnn if self.cnn_hidden == 0 => {
                return Err(Error::BadDims("CNN hidden width must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Trainable scalar count, computed from layer shapes alone.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ReprogrammerKind::Identity => 0,
            ReprogrammerKind::Noise => self.dims.0 * self.dims.1,
            ReprogrammerKind::Cnn => CnnReprogrammer::count_for(self.cnn_hidden),
            ReprogrammerKind::Unet => UnetReprogrammer::count_for(self.unet_widths),
        }
    }
}

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values a forward pass keeps for the matching backward pass.
#[derive(Debug)]
pub enum ForwardCache {
    Stateless { batch: usize },
    Cnn(cnn::CnnCache),
    Unet(unet::UnetCache),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reprogrammer {
    Identity { dims: (usize, usize) },
    Noise(NoiseReprogrammer),
    Cnn(CnnReprogrammer),
    Unet(UnetReprogrammer),
}

impl Reprogrammer {
    /// Deterministic initialization: noise starts at zero, convolutions use
    /// fan-in scaled uniform weights drawn from the seed.
    pub fn init(spec: &ReprogrammerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Lcg64::derive(seed, "reprogrammer");
        Ok(match spec.kind {
            ReprogrammerKind::Identity => Reprogrammer::Identity { dims: spec.dims },
            ReprogrammerKind::Noise => Reprogrammer::Noise(NoiseReprogrammer::zeros(spec.dims)),
            ReprogrammerKind::Cnn => Reprogrammer::Cnn(CnnReprogrammer::new(
                spec.dims,
                spec.cnn_hidden,
                spec.cnn_relu,
                &mut rng,
            )),
            ReprogrammerKind::Unet => {
                Reprogrammer::Unet(UnetReprogrammer::new(spec.dims, spec.unet_widths, &mut rng))
            }
        })
    }

    pub fn kind(&self) -> ReprogrammerKind {
        match self {
            Reprogrammer::Identity { .. } => ReprogrammerKind::Identity,
            Reprogrammer::Noise(_) => ReprogrammerKind::Noise,
            Reprogrammer::Cnn(_) => ReprogrammerKind::Cnn,
            Reprogrammer::Unet(_) => ReprogrammerKind::Unet,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Reprogrammer::Identity { dims } => *dims,
            Reprogrammer::Noise(r) => r.dims(),
            Reprogrammer::Cnn(r) => r.dims,
            Reprogrammer::Unet(r) => r.dims,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Reprogrammer::Identity { .. } => Vec::new(),
            Reprogrammer::Noise(r) => vec![&r.delta],
            Reprogrammer::Cnn(r) => r.params(),
            Reprogrammer::Unet(r) => r.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Reprogrammer::Identity { .. } => Vec::new(),
            Reprogrammer::Noise(r) => vec![&mut r.delta],
            Reprogrammer::Cnn(r) => r.params_mut(),
            Reprogrammer::Unet(r) => r.params_mut(),
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&Param> {
        match self {
            Reprogrammer::Unet(r) => r.buffers(),
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Reprogrammer::Unet(r) => r.buffers_mut(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.dims() {
            return Err(Error::shape(self.dims(), dims));
        }
        Ok(())
    }

    /// Transforms one spectrogram (evaluation mode).
    pub fn forward(&self, x: &Spectrogram) -> Result<Spectrogram> {
        let (mut outs, _) = self.forward_batch(&[x], Mode::Eval)?;
        x.with_values(outs.pop().expect("one output"))
    }

    /// Transforms a batch; outputs are flat `frames * mel` planes.
    pub fn forward_batch(&self, xs: &[&Spectrogram], mode: Mode) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        for x in xs {
            self.check_dims(x.dims())?;
        }
        Ok(match self {
            Reprogrammer::Identity { .. } => (
                xs.iter().map(|x| x.values().to_vec()).collect(),
                ForwardCache::Stateless { batch: xs.len() },
            ),
            Reprogrammer::Noise(r) => (
                xs.iter().map(|x| r.apply(x.values())).collect(),
                ForwardCache::Stateless { batch: xs.len() },
            ),
            Reprogrammer::Cnn(r) => {
                let (outs, cache) = r.forward_batch(xs);
                (outs, ForwardCache::Cnn(cache))
            }
            Reprogrammer::Unet(r) => {
                let (outs, cache) = r.forward_batch(xs, mode);
                (outs, ForwardCache::Unet(cache))
            }
        })
    }

    /// Parameter gradients of `sum_i <upstream_i, forward(x_i)>`, one vector
    /// per entry of [`Reprogrammer::params`].
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (t, f) = self.dims();
        for u in upstream {
            if u.len() != t * f {
                return Err(Error::shape(t * f, u.len()));
            }
        }
        match (self, cache) {
            (Reprogrammer::Identity { .. }, _) => Ok(Vec::new()),
            (Reprogrammer::Noise(_), _) => Ok(vec![NoiseReprogrammer::gradient(upstream)]),
            (Reprogrammer::Cnn(r), ForwardCache::Cnn(c)) => Ok(r.backward_batch(c, upstream)),
            (Reprogrammer::Unet(r), ForwardCache::Unet(c)) => Ok(r.backward_batch(c, upstream)),
            _ => Err(Error::shape(self.kind(), "cache from another reprogrammer")),
        }
    }

    /// Gradient for a single input.
    pub fn gradient(&self, x: &Spectrogram, upstream: &[f64], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.forward_batch(&[x], mode)?;
        self.backward_batch(&cache, &[upstream.to_vec()])
    }

    /// Folds the batch statistics from a training-mode pass into the running
    /// averages used in evaluation mode.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache) {
        if let (Reprogrammer::Unet(r), ForwardCache::Unet(c)) = (self, cache) {
            r.update_running(c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ReprogrammerKind, dims: (usize, usize)) -> ReprogrammerSpec {
        ReprogrammerSpec::new(kind, dims)
    }

    #[test]
    fn noise_initializes_to_identity() {
        let r = Reprogrammer::init(&spec(ReprogrammerKind::Noise, (1024, 128)), 0).unwrap();
        assert!(r.params()[0].data.iter().all(|v| *v == 0.0));
        assert_eq!(r.param_count(), 131_072);
        let mut rng = Lcg64::new(1);
        let x = Spectrogram::new((0..1024 * 128).map(|_| rng.normal()).collect(), 1024, 128, 10.0).unwrap();
        assert_eq!(r.forward(&x).unwrap(), x);
    }

    #[test]
    fn unet_rejects_indivisible_dims() {
        let err = Reprogrammer::init(&spec(ReprogrammerKind::Unet, (1023, 128)), 0).unwrap_err();
        assert!(matches!(err, Error::BadDims(_)));
    }

    #[test]
    fn cnn_init_is_deterministic() {
        let mut s = spec(ReprogrammerKind::Cnn, (16, 16));
        s.cnn_hidden = 16;
        let a = Reprogrammer::init(&s, 7).unwrap();
        let b = Reprogrammer::init(&s, 7).unwrap();
        let bits = |r: &Reprogrammer| -> Vec<u64> {
            r.params()
                .iter()
                .flat_map(|p| p.data.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = Reprogrammer::init(&s, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn identity_has_no_parameters() {
        let r = Reprogrammer::init(&spec(ReprogrammerKind::Identity, (8, 8)), 0).unwrap();
        assert_eq!(r.param_count(), 0);
        assert_eq!(spec(ReprogrammerKind::Identity, (8, 8)).param_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let r = Reprogrammer::init(&spec(ReprogrammerKind::Noise, (8, 8)), 0).unwrap();
        let x = Spectrogram::filled(8, 16, 0.0).unwrap();
        assert!(matches!(r.forward(&x), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            r.gradient(&Spectrogram::filled(8, 8, 0.0).unwrap(), &[0.0; 3], Mode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn counts_agree_with_constructed_models() {
        for kind in [
            ReprogrammerKind::Identity,
            ReprogrammerKind::Noise,
            ReprogrammerKind::Cnn,
            ReprogrammerKind::Unet,
        ] {
            let s = spec(kind, (32, 24));
            let r = Reprogrammer::init(&s, 1).unwrap();
            assert_eq!(r.param_count(), s.param_count(), "{kind}");
        }
    }

    #[test]
    fn cnn_count_is_independent_of_dims() {
        let a = spec(ReprogrammerKind::Cnn, (16, 16)).param_count();
        let b = spec(ReprogrammerKind::Cnn, (1024, 128)).param_count();
        assert_eq!(a, b);
    }
}
