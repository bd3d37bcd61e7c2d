use crate::datamodel::Spectrogram;
use crate::nn::{relu, relu_backward, Conv2d, FeatureMap, Param};
use crate::rng::Lcg64;

/// Two 3x3 convolutions (1 -> hidden -> 1) with an optional ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnReprogrammer {
    pub dims: (usize, usize),
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub relu: bool,
}

#[derive(Debug)]
pub struct CnnCache {
    inputs: Vec<FeatureMap>,
    hidden_pre: Vec<FeatureMap>,
    hidden: Vec<FeatureMap>,
}

impl CnnReprogrammer {
    pub const DEFAULT_HIDDEN: usize = 16;

    pub fn new(dims: (usize, usize), hidden: usize, relu: bool, rng: &mut Lcg64) -> Self {
        Self {
            dims,
            conv1: Conv2d::new("cnn.conv1", 1, hidden, rng),
            conv2: Conv2d::new("cnn.conv2", hidden, 1, rng),
            relu,
        }
    }

    pub fn count_for(hidden: usize) -> usize {
        Conv2d::param_count(1, hidden) + Conv2d::param_count(hidden, 1)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }

    pub(super) fn forward_batch(&self, xs: &[&Spectrogram]) -> (Vec<Vec<f64>>, CnnCache) {
        let (t, f) = self.dims;
        let mut cache = CnnCache {
            inputs: Vec::with_capacity(xs.len()),
            hidden_pre: Vec::with_capacity(xs.len()),
            hidden: Vec::with_capacity(xs.len()),
        };
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let input = FeatureMap::from_plane(t, f, x.values().to_vec());
            let pre = self.conv1.forward(&input);
            let hidden = if self.relu { relu(&pre) } else { pre.clone() };
            outs.push(self.conv2.forward(&hidden).data);
            cache.inputs.push(input);
            cache.hidden_pre.push(pre);
            cache.hidden.push(hidden);
        }
        (outs, cache)
    }

    pub(super) fn backward_batch(&self, cache: &CnnCache, upstream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (t, f) = self.dims;
        let mut g = vec![
            vec![0.0; self.conv1.weight.len()],
            vec![0.0; self.conv1.bias.len()],
            vec![0.0; self.conv2.weight.len()],
            vec![0.0; self.conv2.bias.len()],
        ];
        let (g1, g2) = g.split_at_mut(2);
        let (gw1, gb1) = g1.split_at_mut(1);
        let (gw2, gb2) = g2.split_at_mut(1);
        for (i, up) in upstream.iter().enumerate() {
            let go = FeatureMap::from_plane(t, f, up.clone());
            let gh = self
                .conv2
                .backward(&cache.hidden[i], &go, &mut gw2[0], &mut gb2[0], true)
                .expect("input gradient requested");
            let gpre = if self.relu {
                relu_backward(&cache.hidden_pre[i], &gh)
            } else {
                gh
            };
            self.conv1
                .backward(&cache.inputs[i], &gpre, &mut gw1[0], &mut gb1[0], false);
        }
        g
    }
}
