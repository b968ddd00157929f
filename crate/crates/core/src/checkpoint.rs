//! "DBLF" checkpoint files.
//!
//! Layout (little-endian): magic `DBLF`, version `u32`, config blob length
//! `u32` and UTF-8 bytes, then records until end of file, each
//! `name_len u32, name, rank u32, dims u32 × rank, f32 × prod(dims)`.
//!
//! Network parameters are stored under `analysis.`, `synthesis.` and
//! `classifier.` prefixes so one file may carry several networks.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DBLF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Canonical configuration text (see [`crate::config::RunConfig`]).
    pub config: String,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(config: String, params: ParamSet<f32>) -> Self {
        Checkpoint { config, params }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u32).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a DBLF checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.u32()? as usize;
        let config = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let mut params = ParamSet::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("parameter {name:?} has an implausible shape {dims:?}")))?;
            let raw = cur.take(4 * count)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params
                .insert(name, Tensor::new(dims, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(Checkpoint { config, params })
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parameters under `prefix.`, with the prefix removed.
    pub fn network(&self, prefix: &str) -> ParamSet<f32> {
        self.params.strip_prefix(prefix)
    }

    pub fn has_network(&self, prefix: &str) -> bool {
        let lead = format!("{prefix}.");
        self.params.names().any(|n| n.starts_with(&lead))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.insert("a.weight", Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e-30]).unwrap())
            .unwrap();
        ps.insert("a.bias", Tensor::scalar(0.5)).unwrap();
        Checkpoint::new("preset = toy\n".into(), ps)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_duplicates_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::scalar(1.0)).unwrap();
        let one = Checkpoint::new(String::new(), ps).to_bytes();
        let header = 4 + 4 + 4;
        let mut dup = one.clone();
        dup.extend_from_slice(&one[header..]);
        assert!(matches!(Checkpoint::from_bytes(&dup), Err(Error::Format(_))));
    }
}
