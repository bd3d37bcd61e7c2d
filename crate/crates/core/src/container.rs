//! Binary container shared by checkpoints and spectrogram cache files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RPGM" | version u32
//! kind: u16 length + UTF-8
//! meta count u32, then per entry: u16 key length + key, u32 value length + value
//! block count u32, then per block:
//!     u16 name length + name | u8 rank | rank x u32 dims | f32 values
//! SHA-256 of every preceding byte (32 bytes)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Param;

pub const MAGIC: &[u8; 4] = b"RPGM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<Param>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing header field `{key}`")))
    }

    pub fn block(&self, name: &str) -> Option<&Param> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str16(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str16(&mut out, k);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str16(&mut out, &b.name);
            out.push(b.shape.len() as u8);
            for d in &b.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::CheckpointCorrupt("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointCorrupt(format!("unsupported version {version}")));
        }
        let kind = r.str16()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            let k = r.str16()?;
            let len = r.u32()? as usize;
            let v = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt("non-UTF-8 header value".into()))?;
            meta.push((k, v));
        }
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let name = r.str16()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::CheckpointCorrupt("block too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            blocks.push(Param { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::CheckpointCorrupt("trailing bytes".into()));
        }
        Ok(Self { kind, meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Values as they read back from the container (single precision).
pub fn round_to_stored(v: f64) -> f64 {
    v as f32 as f64
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointCorrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self) -> Result<String> {
        let b = self.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("non-UTF-8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new("checkpoint");
        c.meta.push(("config".into(), "a = 1\nb = x\n".into()));
        c.blocks.push(Param {
            name: "fcl.weight".into(),
            shape: vec![2, 3],
            data: vec![0.5, -1.25, 3.0, 0.0, 1e-3, -7.5],
        });
        c
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().encode();
        for i in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            bytes[i] ^= 0x40;
            assert!(matches!(
                Container::decode(&bytes),
                Err(Error::CheckpointCorrupt(_))
            ));
            bytes[i] ^= 0x40;
        }
        assert!(Container::decode(&bytes).is_ok());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().encode();
        assert!(Container::decode(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_single_precision_values(
            values in proptest::collection::vec(-1e6f64..1e6, 1..40),
            key in "[a-z.]{1,12}", value in "[ -~]{0,40}"
        ) {
            let mut c = Container::new("spectrogram");
            c.meta.push((key, value));
            c.blocks.push(Param { name: "x".into(), shape: vec![values.len()], data: values.clone() });
            let back = Container::decode(&c.encode()).unwrap();
            prop_assert_eq!(&back.meta, &c.meta);
            let expected: Vec<f64> = values.iter().map(|v| round_to_stored(*v)).collect();
            prop_assert_eq!(&back.blocks[0].data, &expected);
            // Encoding what was decoded is byte-stable.
            prop_assert_eq!(back.encode(), Container { blocks: vec![Param { data: expected, ..c.blocks[0].clone() }], ..c }.encode());
        }
    }
}
