use crate::nn::Param;

/// Additive perturbation `X + N` with one trainable value per spectrogram cell.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReprogrammer {
    pub delta: Param,
}

impl NoiseReprogrammer {
    pub fn zeros(dims: (usize, usize)) -> Self {
        Self {
            delta: Param::zeros("noise.delta", vec![dims.0, dims.1]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.delta.shape[0], self.delta.shape[1])
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.delta.data).map(|(a, n)| a + n).collect()
    }

    /// d(X + N)/dN is the identity, so the gradient is the summed upstream.
    pub fn gradient(upstream: &[Vec<f64>]) -> Vec<f64> {
        let mut g = vec![0.0; upstream.first().map_or(0, Vec::len)];
        for u in upstream {
            for (gi, ui) in g.iter_mut().zip(u) {
                *gi += ui;
            }
        }
        g
    }
}
