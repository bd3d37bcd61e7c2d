//! Output label mapping from backbone source scores to target instrument
//! probabilities.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::datamodel::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::rng::Lcg64;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapperKind {
    ManyToOne,
    Fcl,
}

impl MapperKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapperKind::ManyToOne => "many_to_one",
            MapperKind::Fcl => "fcl",
        }
    }
}

impl FromStr for MapperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "many_to_one" => Ok(MapperKind::ManyToOne),
            "fcl" => Ok(MapperKind::Fcl),
            other => Err(Error::config(
                "mapper.kind",
                format!("unknown kind `{other}` (expected many_to_one or fcl)"),
            )),
        }
    }
}

impl fmt::Display for MapperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// For every target class, the set of source classes whose probabilities are
/// averaged. Sets may overlap across targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ManyToOneAssignment {
    sets: Vec<Vec<usize>>,
    k_src: usize,
}

impl ManyToOneAssignment {
    pub fn new(sets: Vec<Vec<usize>>, k_src: usize) -> Result<Self> {
        for (c, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::EmptyAssignment(format!("#{c}")));
            }
            if let Some(&index) = set.iter().find(|i| **i >= k_src) {
                return Err(Error::IndexOutOfRange { index, k_src });
            }
        }
        Ok(Self { sets, k_src })
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn k_src(&self) -> usize {
        self.k_src
    }

    pub fn n_targets(&self) -> usize {
        self.sets.len()
    }

    /// Parses `target_name: src, src, ...` lines. Sources are indices or,
    /// when a source vocabulary is given, class names. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(
        text: &str,
        targets: &Vocabulary,
        sources: Option<&Vocabulary>,
        k_src: usize,
    ) -> Result<Self> {
        let mut sets: Vec<Option<Vec<usize>>> = vec![None; targets.size()];
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::MappingParse {
                line: line_no,
                message,
            };
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| err("expected `target: sources`".into()))?;
            let name = name.trim();
            let c = targets
                .index_of(name)
                .ok_or_else(|| err(format!("unknown target `{name}`")))?;
            if sets[c].is_some() {
                return Err(err(format!("target `{name}` listed twice")));
            }
            let mut seen = HashSet::new();
            let mut set = Vec::new();
            for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let idx = match tok.parse::<usize>() {
                    Ok(i) => i,
                    Err(_) => sources
                        .and_then(|v| v.index_of(tok))
                        .ok_or_else(|| err(format!("unknown source `{tok}`")))?,
                };
                if idx >= k_src {
                    return Err(Error::IndexOutOfRange { index: idx, k_src });
                }
                if !seen.insert(idx) {
                    return Err(err(format!("duplicate source `{tok}`")));
                }
                set.push(idx);
            }
            sets[c] = Some(set);
        }
        let sets = sets
            .into_iter()
            .enumerate()
            .map(|(c, s)| match s {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::EmptyAssignment(targets.name(c).to_string())),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sets, k_src)
    }
}

/// Mean of the source probabilities over each target's set.
pub fn many_to_one_forward(source_probs: &[f64], a: &ManyToOneAssignment) -> Result<Vec<f64>> {
    if source_probs.len() != a.k_src {
        return Err(Error::shape(a.k_src, source_probs.len()));
    }
    Ok(a.sets
        .iter()
        .map(|set| set.iter().map(|i| source_probs[*i]).sum::<f64>() / set.len() as f64)
        .collect())
}

/// Trainable affine map from source scores to target logits followed by a
/// sigmoid. `weight` is `k_src x C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FclMapper {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FclGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub scores: Vec<f64>,
}

impl FclMapper {
    /// Weights uniform in `+-1/sqrt(k_src)`, bias zero.
    pub fn init(k_src: usize, n_targets: usize, seed: u64) -> Self {
        let mut rng = Lcg64::derive(seed, "fcl");
        let bound = 1.0 / (k_src as f64).sqrt();
        let mut weight = Param::zeros("fcl.weight", vec![k_src, n_targets]);
        for w in weight.data.iter_mut() {
            *w = rng.uniform(-bound, bound);
        }
        Self {
            weight,
            bias: Param::zeros("fcl.bias", vec![n_targets]),
        }
    }

    pub fn zeros(k_src: usize, n_targets: usize) -> Self {
        Self {
            weight: Param::zeros("fcl.weight", vec![k_src, n_targets]),
            bias: Param::zeros("fcl.bias", vec![n_targets]),
        }
    }

    pub fn k_src(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn n_targets(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn param_count_for(k_src: usize, n_targets: usize) -> usize {
        k_src * n_targets + n_targets
    }

    fn logits(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.k_src() {
            return Err(Error::shape(self.k_src(), scores.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let c_n = self.n_targets();
        let mut z = self.bias.data.clone();
        for (row, s) in self.weight.data.chunks_exact(c_n).zip(scores) {
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += w * s;
            }
        }
        Ok(z)
    }
}

pub fn fcl_forward(scores: &[f64], m: &FclMapper) -> Result<Vec<f64>> {
    Ok(m.logits(scores)?.into_iter().map(sigmoid).collect())
}

/// Gradients of `<upstream, fcl_forward(scores)>`.
pub fn fcl_gradient(scores: &[f64], m: &FclMapper, upstream: &[f64]) -> Result<FclGradient> {
    let c_n = m.n_targets();
    if upstream.len() != c_n {
        return Err(Error::shape(c_n, upstream.len()));
    }
    let probs = fcl_forward(scores, m)?;
    let dz: Vec<f64> = probs
        .iter()
        .zip(upstream)
        .map(|(p, u)| u * p * (1.0 - p))
        .collect();
    let mut weight = vec![0.0; m.weight.len()];
    let mut d_scores = vec![0.0; scores.len()];
    for (k, s) in scores.iter().enumerate() {
        let row = &m.weight.data[k * c_n..(k + 1) * c_n];
        let grow = &mut weight[k * c_n..(k + 1) * c_n];
        let mut acc = 0.0;
        for c in 0..c_n {
            grow[c] = s * dz[c];
            acc += row[c] * dz[c];
        }
        d_scores[k] = acc;
    }
    Ok(FclGradient {
        weight,
        bias: dz,
        scores: d_scores,
    })
}

/// Source scores to target probabilities, either fixed or trainable.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelMapper {
    /// Scores are squashed by a sigmoid and then averaged per target.
    ManyToOne(ManyToOneAssignment),
    Fcl(FclMapper),
}

impl LabelMapper {
    pub fn kind(&self) -> MapperKind {
        match self {
            LabelMapper::ManyToOne(_) => MapperKind::ManyToOne,
            LabelMapper::Fcl(_) => MapperKind::Fcl,
        }
    }

    pub fn n_targets(&self) -> usize {
        match self {
            LabelMapper::ManyToOne(a) => a.n_targets(),
            LabelMapper::Fcl(m) => m.n_targets(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            LabelMapper::ManyToOne(_) => Vec::new(),
            LabelMapper::Fcl(m) => vec![&m.weight, &m.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            LabelMapper::ManyToOne(_) => Vec::new(),
            LabelMapper::Fcl(m) => vec![&mut m.weight, &mut m.bias],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, scores: &[f64]) -> Result<Vec<f64>> {
        match self {
            LabelMapper::ManyToOne(a) => {
                if scores.iter().any(|s| !s.is_finite()) {
                    return Err(Error::NonFiniteInput);
                }
                let probs: Vec<f64> = scores.iter().map(|s| sigmoid(*s)).collect();
                many_to_one_forward(&probs, a)
            }
            LabelMapper::Fcl(m) => fcl_forward(scores, m),
        }
    }

    /// Parameter gradients (aligned with [`LabelMapper::params`]) and the
    /// gradient with respect to the source scores.
    pub fn backward(&self, scores: &[f64], upstream: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        match self {
            LabelMapper::ManyToOne(a) => {
                let mut d = vec![0.0; scores.len()];
                for (set, u) in a.sets().iter().zip(upstream) {
                    let share = u / set.len() as f64;
                    for i in set {
                        d[*i] += share;
                    }
                }
                for (di, s) in d.iter_mut().zip(scores) {
                    let p = sigmoid(*s);
                    *di *= p * (1.0 - p);
                }
                Ok((Vec::new(), d))
            }
            LabelMapper::Fcl(m) => {
                let g = fcl_gradient(scores, m, upstream)?;
                Ok((vec![g.weight, g.bias], g.scores))
            }
        }
    }
}
