//! Best-epoch training state in the binary container format. Only the
//! reprogrammer and mapper appear; backbone parameters are never stored.

use std::path::Path;

use crate::backbone::Fingerprint;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::Param;

const KIND: &str = "checkpoint";
const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical configuration text of the run.
    pub config_text: String,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_macro_f1: f64,
    pub fingerprint: Fingerprint,
    /// Batch-order generator state after `epoch`.
    pub rng_state: u64,
    pub optimizer_step: u64,
    pub params: Vec<Param>,
    pub buffers: Vec<Param>,
    pub adam_m: Vec<Param>,
    pub adam_v: Vec<Param>,
}

fn prefixed<'a>(prefix: &str, blocks: &'a [Param]) -> impl Iterator<Item = Param> + 'a {
    let prefix = prefix.to_string();
    blocks.iter().map(move |p| Param {
        name: format!("{prefix}{}", p.name),
        ..p.clone()
    })
}

fn parse_meta<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| Error::CheckpointCorrupt(format!("bad header field `{key}`")))
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        c.meta = vec![
            ("config".into(), self.config_text.clone()),
            ("seed".into(), self.seed.to_string()),
            ("epoch".into(), self.epoch.to_string()),
            // Bit pattern keeps the value exact.
            (
                "best_val_macro_f1".into(),
                format!("{:016x}", self.best_val_macro_f1.to_bits()),
            ),
            ("fingerprint".into(), self.fingerprint.to_hex()),
            ("rng_state".into(), self.rng_state.to_string()),
            ("optimizer_step".into(), self.optimizer_step.to_string()),
        ];
        c.blocks = prefixed(PARAM, &self.params)
            .chain(prefixed(BUFFER, &self.buffers))
            .chain(prefixed(ADAM_M, &self.adam_m))
            .chain(prefixed(ADAM_V, &self.adam_v))
            .collect();
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::CheckpointCorrupt(format!(
                "expected a checkpoint, found `{}`",
                c.kind
            )));
        }
        let bits = u64::from_str_radix(c.require_meta("best_val_macro_f1")?, 16)
            .map_err(|_| Error::CheckpointCorrupt("bad header field `best_val_macro_f1`".into()))?;
        let mut out = Self {
            config_text: c.require_meta("config")?.to_string(),
            seed: parse_meta(&c, "seed")?,
            epoch: parse_meta(&c, "epoch")?,
            best_val_macro_f1: f64::from_bits(bits),
            fingerprint: Fingerprint::from_hex(c.require_meta("fingerprint")?)?,
            rng_state: parse_meta(&c, "rng_state")?,
            optimizer_step: parse_meta(&c, "optimizer_step")?,
            params: Vec::new(),
            buffers: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        for mut b in c.blocks {
            let (list, prefix) = if b.name.starts_with(PARAM) {
                (&mut out.params, PARAM)
            } else if b.name.starts_with(BUFFER) {
                (&mut out.buffers, BUFFER)
            } else if b.name.starts_with(ADAM_M) {
                (&mut out.adam_m, ADAM_M)
            } else if b.name.starts_with(ADAM_V) {
                (&mut out.adam_v, ADAM_V)
            } else {
                return Err(Error::CheckpointCorrupt(format!("unexpected block `{}`", b.name)));
            };
            b.name = b.name[prefix.len()..].to_string();
            list.push(b);
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Refuses to resume against a backbone other than the one trained with.
    pub fn verify_fingerprint(&self, live: &Fingerprint) -> Result<()> {
        if &self.fingerprint != live {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.to_hex(),
                actual: live.to_hex(),
            });
        }
        Ok(())
    }
}

/// Copies stored blocks into live parameters, matching by name and shape.
pub fn restore_blocks(stored: &[Param], live: Vec<&mut Param>) -> Result<()> {
    if stored.len() != live.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "expected {} blocks, found {}",
            live.len(),
            stored.len()
        )));
    }
    for p in live {
        let s = stored
            .iter()
            .find(|s| s.name == p.name)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing block `{}`", p.name)))?;
        if s.shape != p.shape {
            return Err(Error::CheckpointCorrupt(format!(
                "block `{}` has shape {:?}, expected {:?}",
                p.name, s.shape, p.shape
            )));
        }
        p.data.clone_from(&s.data);
    }
    Ok(())
}
