use super::Mode;
use crate::datamodel::Spectrogram;
use crate::nn::{
    max_pool2, max_pool2_backward, relu, relu_backward, upsample_bilinear2, upsample_bilinear2_backward,
    BatchNorm2d, BnCache, Conv2d, FeatureMap, Param,
};
use crate::rng::Lcg64;

/// conv 3x3 -> batch-norm, optionally followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBlock {
    fn new(name: &str, cin: usize, cout: usize, relu: bool, rng: &mut Lcg64) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu,
        }
    }

    fn count_for(cin: usize, cout: usize) -> usize {
        Conv2d::param_count(cin, cout) + 2 * cout
    }
}

#[derive(Debug)]
struct BlockCache {
    input: Vec<FeatureMap>,
    conv_out: Vec<FeatureMap>,
    bn_out: Vec<FeatureMap>,
    bn: Option<BnCache>,
}

#[derive(Debug)]
pub struct UnetCache {
    mode: Mode,
    down: Vec<BlockCache>,
    pool_args: Vec<Vec<Vec<usize>>>,
    skip_shapes: Vec<(usize, usize, usize)>,
    up: Vec<BlockCache>,
    up_channels: Vec<usize>,
}

/// Three-level U-Net: each contraction block is conv-BN-ReLU followed by 2x2
/// max-pooling; each expansion block upsamples bilinearly, concatenates the
/// skip features of the same level and applies conv-BN(-ReLU). The final
/// expansion block maps back to one channel and has no ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetReprogrammer {
    pub dims: (usize, usize),
    pub widths: [usize; 3],
    /// Contraction blocks, shallowest first.
    pub down: Vec<ConvBlock>,
    /// Expansion blocks, deepest first.
    pub up: Vec<ConvBlock>,
}

impl UnetReprogrammer {
    pub const DEFAULT_WIDTHS: [usize; 3] = [4, 8, 16];

    pub fn new(dims: (usize, usize), widths: [usize; 3], rng: &mut Lcg64) -> Self {
        let [w0, w1, w2] = widths;
        let down = vec![
            ConvBlock::new("unet.down0", 1, w0, true, rng),
            ConvBlock::new("unet.down1", w0, w1, true, rng),
            ConvBlock::new("unet.down2", w1, w2, true, rng),
        ];
        let up = vec![
            ConvBlock::new("unet.up2", w2 + w2, w1, true, rng),
            ConvBlock::new("unet.up1", w1 + w1, w0, true, rng),
            ConvBlock::new("unet.up0", w0 + w0, 1, false, rng),
        ];
        Self {
            dims,
            widths,
            down,
            up,
        }
    }

    pub fn count_for(widths: [usize; 3]) -> usize {
        let [w0, w1, w2] = widths;
        ConvBlock::count_for(1, w0)
            + ConvBlock::count_for(w0, w1)
            + ConvBlock::count_for(w1, w2)
            + ConvBlock::count_for(2 * w2, w1)
            + ConvBlock::count_for(2 * w1, w0)
            + ConvBlock::count_for(2 * w0, 1)
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.down.iter().chain(self.up.iter())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks()
            .flat_map(|b| [&b.conv.weight, &b.conv.bias, &b.bn.gamma, &b.bn.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.down
            .iter_mut()
            .chain(self.up.iter_mut())
            .flat_map(|b| {
                [
                    &mut b.conv.weight,
                    &mut b.conv.bias,
                    &mut b.bn.gamma,
                    &mut b.bn.beta,
                ]
            })
            .collect()
    }

    pub fn buffers(&self) -> Vec<&Param> {
        self.blocks()
            .flat_map(|b| [&b.bn.running_mean, &b.bn.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param> {
        self.down
            .iter_mut()
            .chain(self.up.iter_mut())
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }

    fn block_forward(
        block: &ConvBlock,
        inputs: Vec<FeatureMap>,
        mode: Mode,
    ) -> (Vec<FeatureMap>, BlockCache) {
        let conv_out: Vec<FeatureMap> = inputs.iter().map(|x| block.conv.forward(x)).collect();
        let (bn_out, bn_cache) = match mode {
            Mode::Train => {
                let (ys, c) = block.bn.forward_train(&conv_out);
                (ys, Some(c))
            }
            Mode::Eval => (conv_out.iter().map(|z| block.bn.forward_eval(z)).collect(), None),
        };
        let outs = if block.relu {
            bn_out.iter().map(relu).collect()
        } else {
            bn_out.clone()
        };
        (
            outs,
            BlockCache {
                input: inputs,
                conv_out,
                bn_out,
                bn: bn_cache,
            },
        )
    }

    /// Returns gradients with respect to the block inputs (when requested)
    /// and accumulates the four parameter gradients into `grads`.
    fn block_backward(
        block: &ConvBlock,
        cache: &BlockCache,
        grad_out: Vec<FeatureMap>,
        grads: &mut [Vec<f64>],
        want_input: bool,
    ) -> Vec<FeatureMap> {
        let g_bn: Vec<FeatureMap> = if block.relu {
            grad_out
                .iter()
                .zip(&cache.bn_out)
                .map(|(g, pre)| relu_backward(pre, g))
                .collect()
        } else {
            grad_out
        };
        let (gw_gb, gg_gbeta) = grads.split_at_mut(2);
        let (gw, gb) = gw_gb.split_at_mut(1);
        let (gg, gbeta) = gg_gbeta.split_at_mut(1);
        let g_conv: Vec<FeatureMap> = match &cache.bn {
            Some(bn_cache) => block
                .bn
                .backward_train(bn_cache, &g_bn, &mut gg[0], &mut gbeta[0]),
            None => g_bn
                .iter()
                .zip(&cache.conv_out)
                .map(|(g, z)| block.bn.backward_eval(z, g, &mut gg[0], &mut gbeta[0]))
                .collect(),
        };
        g_conv
            .iter()
            .zip(&cache.input)
            .filter_map(|(g, x)| block.conv.backward(x, g, &mut gw[0], &mut gb[0], want_input))
            .collect()
    }

    pub(super) fn forward_batch(&self, xs: &[&Spectrogram], mode: Mode) -> (Vec<Vec<f64>>, UnetCache) {
        let (t, f) = self.dims;
        let mut current: Vec<FeatureMap> = xs
            .iter()
            .map(|x| FeatureMap::from_plane(t, f, x.values().to_vec()))
            .collect();
        let mut down_caches = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        let mut pool_args = Vec::with_capacity(3);
        let mut skip_shapes = Vec::with_capacity(3);
        for block in &self.down {
            let (acts, cache) = Self::block_forward(block, current, mode);
            down_caches.push(cache);
            let (pooled, args): (Vec<_>, Vec<_>) = acts.iter().map(max_pool2).unzip();
            skip_shapes.push((acts[0].channels, acts[0].height, acts[0].width));
            skips.push(acts);
            pool_args.push(args);
            current = pooled;
        }
        let mut up_caches = Vec::with_capacity(3);
        let mut up_channels = Vec::with_capacity(3);
        for (block, skip) in self.up.iter().zip(skips.iter().rev()) {
            up_channels.push(current[0].channels);
            let inputs: Vec<FeatureMap> = current
                .iter()
                .zip(skip)
                .map(|(c, s)| FeatureMap::concat(&upsample_bilinear2(c), s))
                .collect();
            let (acts, cache) = Self::block_forward(block, inputs, mode);
            up_caches.push(cache);
            current = acts;
        }
        let outs = current.into_iter().map(|m| m.data).collect();
        (
            outs,
            UnetCache {
                mode,
                down: down_caches,
                pool_args,
                skip_shapes,
                up: up_caches,
                up_channels,
            },
        )
    }

    pub(super) fn backward_batch(&self, cache: &UnetCache, upstream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (t, f) = self.dims;
        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let n_down = self.down.len();
        let mut g: Vec<FeatureMap> = upstream
            .iter()
            .map(|u| FeatureMap::from_plane(t, f, u.clone()))
            .collect();
        let mut skip_grads: Vec<Vec<FeatureMap>> = vec![Vec::new(); n_down];
        // Expansion blocks are stored deepest first; undo them last-to-first.
        for (k, block) in self.up.iter().enumerate().rev() {
            let slot = 4 * (n_down + k);
            let g_in = Self::block_backward(block, &cache.up[k], g, &mut grads[slot..slot + 4], true);
            let level = n_down - 1 - k;
            let mut g_prev = Vec::with_capacity(g_in.len());
            for gi in g_in {
                let (g_up, g_skip) = gi.split(cache.up_channels[k]);
                g_prev.push(upsample_bilinear2_backward(&g_up));
                skip_grads[level].push(g_skip);
            }
            g = g_prev;
        }
        for level in (0..n_down).rev() {
            let shape = cache.skip_shapes[level];
            let g_act: Vec<FeatureMap> = g
                .iter()
                .zip(&cache.pool_args[level])
                .zip(&skip_grads[level])
                .map(|((gp, args), gs)| {
                    let mut ga = max_pool2_backward(shape, args, gp);
                    ga.add_assign(gs);
                    ga
                })
                .collect();
            let slot = 4 * level;
            g = Self::block_backward(
                &self.down[level],
                &cache.down[level],
                g_act,
                &mut grads[slot..slot + 4],
                level > 0,
            );
        }
        grads
    }

    pub(super) fn update_running(&mut self, cache: &UnetCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let caches = cache.down.iter().chain(cache.up.iter());
        for (block, c) in self.down.iter_mut().chain(self.up.iter_mut()).zip(caches) {
            if let Some(bn) = &c.bn {
                block.bn.update_running(bn);
            }
        }
    }
}
