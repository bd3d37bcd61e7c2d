//! Minimal dense layers with hand-written backward passes, used by the
//! convolutional reprogrammers. Feature maps are `[channel][row][col]`
//! row-major; rows run along time and columns along mel bands.

use crate::rng::Lcg64;

/// A named, shaped block of trainable scalars (or a non-trainable buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.data.fill(value);
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_plane(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            channels: 1,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Inverse of `concat` for gradients: the first `channels` go left.
    pub fn split(self, channels: usize) -> (FeatureMap, FeatureMap) {
        let n = self.plane_len();
        let mut data = self.data;
        let rest = data.split_off(channels * n);
        (
            FeatureMap {
                channels,
                height: self.height,
                width: self.width,
                data,
            },
            FeatureMap {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// Valid output range along one axis for kernel offset `k` in {0,1,2} with
/// padding 1: returns `(out_start, out_end, in_start)`.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize, usize) {
    match k {
        0 => (1, len, 0),
        1 => (0, len, 0),
        _ => (0, len - 1, 1),
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rng: &mut Lcg64) -> Self {
        let mut weight = Param::zeros(format!("{name}.weight"), vec![out_channels, in_channels, 3, 3]);
        let mut bias = Param::zeros(format!("{name}.bias"), vec![out_channels]);
        let bound = 1.0 / ((in_channels * 9) as f64).sqrt();
        for w in weight.data.iter_mut() {
            *w = rng.uniform(-bound, bound);
        }
        for b in bias.data.iter_mut() {
            *b = rng.uniform(-bound, bound);
        }
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize) -> usize {
        out_channels * in_channels * 9 + out_channels
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight.data[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.channels, self.in_channels);
        let (h, w) = (x.height, x.width);
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let bias = self.bias.data[o];
            let out_plane = out.plane_mut(o);
            out_plane.fill(bias);
            for i in 0..self.in_channels {
                let in_plane = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1, iy0) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1, ix0) = tap_range(kx, w);
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for (dy, y) in (y0..y1).enumerate() {
                            let iy = iy0 + dy;
                            let src = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            axpy(wv, src, dst);
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients into `grads` (`[weight, bias]`
    /// layout) and returns the gradient with respect to the input when asked.
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (x.height, x.width);
        let mut grad_in = want_input.then(|| FeatureMap::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let g_plane = grad_out.plane(o);
            grad_bias[o] += g_plane.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let in_plane = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1, iy0) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1, ix0) = tap_range(kx, w);
                        let n = x1 - x0;
                        let mut acc = 0.0;
                        for (dy, y) in (y0..y1).enumerate() {
                            let iy = iy0 + dy;
                            acc += dot(
                                &g_plane[y * w + x0..y * w + x1],
                                &in_plane[iy * w + ix0..iy * w + ix0 + n],
                            );
                        }
                        grad_weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx] += acc;
                        if let Some(gi) = grad_in.as_mut() {
                            let wv = self.w(o, i, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            let gi_plane = gi.plane_mut(i);
                            for (dy, y) in (y0..y1).enumerate() {
                                let iy = iy0 + dy;
                                axpy(
                                    wv,
                                    &g_plane[y * w + x0..y * w + x1],
                                    &mut gi_plane[iy * w + ix0..iy * w + ix0 + n],
                                );
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        ..*x
    }
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
        ..*pre
    }
}

/// 2x2 max-pooling with stride 2. Returns the pooled map and, for every
/// output cell, the flat index of the selected input cell.
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * x.plane_len();
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * x.width + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(
    input_shape: (usize, usize, usize),
    arg: &[usize],
    grad_out: &FeatureMap,
) -> FeatureMap {
    let (c, h, w) = input_shape;
    let mut g = FeatureMap::zeros(c, h, w);
    for (o, idx) in arg.iter().enumerate() {
        g.data[*idx] += grad_out.data[o];
    }
    g
}

/// Interpolation taps for doubling an axis of length `n` with half-pixel
/// alignment: output `d` reads `(1 - frac) * in[i0] + frac * in[i1]`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear x2 upsampling (half-pixel centers, edge clamped).
pub fn upsample_bilinear2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = FeatureMap::zeros(x.channels, 2 * h, 2 * w);
    let ow = 2 * w;
    for c in 0..x.channels {
        let src = x.plane(c);
        // Rows first into a (h x 2w) buffer, then columns.
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for (d, (i0, i1, f)) in tx.iter().enumerate() {
                rows[y * ow + d] = (1.0 - f) * src[y * w + i0] + f * src[y * w + i1];
            }
        }
        let dst = out.plane_mut(c);
        for (d, (i0, i1, f)) in ty.iter().enumerate() {
            for xx in 0..ow {
                dst[d * ow + xx] = (1.0 - f) * rows[i0 * ow + xx] + f * rows[i1 * ow + xx];
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let ow = 2 * w;
    let mut g = FeatureMap::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let go = grad_out.plane(c);
        let mut rows = vec![0.0; h * ow];
        for (d, (i0, i1, f)) in ty.iter().enumerate() {
            for xx in 0..ow {
                rows[i0 * ow + xx] += (1.0 - f) * go[d * ow + xx];
                rows[i1 * ow + xx] += f * go[d * ow + xx];
            }
        }
        let dst = g.plane_mut(c);
        for y in 0..h {
            for (d, (i0, i1, f)) in tx.iter().enumerate() {
                dst[y * w + i0] += (1.0 - f) * rows[y * ow + d];
                dst[y * w + i1] += f * rows[y * ow + d];
            }
        }
    }
    g
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with affine scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

/// Saved state from a batch-statistics forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Vec<FeatureMap>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Param::zeros(format!("{name}.running_mean"), vec![channels]),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with statistics pooled over the batch and spatial positions.
    pub fn forward_train(&self, xs: &[FeatureMap]) -> (Vec<FeatureMap>, BnCache) {
        let c_n = self.channels();
        let plane = xs[0].plane_len();
        let count = xs.len() * plane;
        let mut mean = vec![0.0; c_n];
        let mut var = vec![0.0; c_n];
        for c in 0..c_n {
            let s: f64 = xs.iter().map(|x| x.plane(c).iter().sum::<f64>()).sum();
            let m = s / count as f64;
            let v: f64 = xs
                .iter()
                .map(|x| x.plane(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / count as f64;
            mean[c] = m;
            var[c] = v;
        }
        let mut normalized = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut nx = x.clone();
            let mut y = x.clone();
            for c in 0..c_n {
                let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                let (g, b) = (self.gamma.data[c], self.beta.data[c]);
                for (n, o) in nx.plane_mut(c).iter_mut().zip(y.plane_mut(c).iter_mut()) {
                    *n = (*n - mean[c]) * inv;
                    *o = g * *n + b;
                }
            }
            normalized.push(nx);
            outs.push(y);
        }
        (
            outs,
            BnCache {
                normalized,
                mean,
                var,
                count,
            },
        )
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = x.clone();
        for c in 0..self.channels() {
            let inv = 1.0 / (self.running_var.data[c] + BN_EPS).sqrt();
            let (g, b, m) = (self.gamma.data[c], self.beta.data[c], self.running_mean.data[c]);
            for v in y.plane_mut(c) {
                *v = g * (*v - m) * inv + b;
            }
        }
        y
    }

    pub fn backward_eval(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
        grad_gamma: &mut [f64],
        grad_beta: &mut [f64],
    ) -> FeatureMap {
        let mut gx = grad_out.clone();
        for c in 0..self.channels() {
            let inv = 1.0 / (self.running_var.data[c] + BN_EPS).sqrt();
            let m = self.running_mean.data[c];
            let g = self.gamma.data[c];
            let go = grad_out.plane(c);
            grad_beta[c] += go.iter().sum::<f64>();
            grad_gamma[c] += go
                .iter()
                .zip(x.plane(c))
                .map(|(d, v)| d * (v - m) * inv)
                .sum::<f64>();
            for v in gx.plane_mut(c) {
                *v *= g * inv;
            }
        }
        gx
    }

    pub fn backward_train(
        &self,
        cache: &BnCache,
        grad_out: &[FeatureMap],
        grad_gamma: &mut [f64],
        grad_beta: &mut [f64],
    ) -> Vec<FeatureMap> {
        let c_n = self.channels();
        let m = cache.count as f64;
        let mut sum_dy = vec![0.0; c_n];
        let mut sum_dy_xhat = vec![0.0; c_n];
        for (go, xh) in grad_out.iter().zip(&cache.normalized) {
            for c in 0..c_n {
                sum_dy[c] += go.plane(c).iter().sum::<f64>();
                sum_dy_xhat[c] += dot(go.plane(c), xh.plane(c));
            }
        }
        for c in 0..c_n {
            grad_beta[c] += sum_dy[c];
            grad_gamma[c] += sum_dy_xhat[c];
        }
        grad_out
            .iter()
            .zip(&cache.normalized)
            .map(|(go, xh)| {
                let mut gx = go.clone();
                for c in 0..c_n {
                    let scale = self.gamma.data[c] / (cache.var[c] + BN_EPS).sqrt() / m;
                    let (sd, sdx) = (sum_dy[c], sum_dy_xhat[c]);
                    for (g, xhat) in gx.plane_mut(c).iter_mut().zip(xh.plane(c)) {
                        *g = scale * (m * *g - sd - xhat * sdx);
                    }
                }
                gx
            })
            .collect()
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        let n = cache.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data[c];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * cache.mean[c];
            let rv = &mut self.running_var.data[c];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * cache.var[c] * unbias;
        }
    }
}
