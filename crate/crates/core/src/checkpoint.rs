//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, version u32, stage u8, epoch u32,
//! rng_seed u64, predecessor hash [u8; 32], encoder config (input_size u32,
//! block count u32, channels u32…, embed_dim u32), head flag u8 (+ h1 u32,
//! h2 u32), then tensor count u32 and per tensor: ndim u32, dims u32…,
//! values f64….

use std::fmt;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;

const MAGIC: &[u8; 8] = b"HCCKPT\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Relax,
    Finetune,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Relax => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Relax),
            2 => Ok(Stage::Finetune),
            _ => Err(Error::Checkpoint(format!("unknown stage code {c}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Relax => "relax",
            Stage::Finetune => "finetune",
        })
    }
}

/// Classifier and auxiliary head parameters with their hidden widths.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub hidden: (usize, usize),
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: u32,
    pub rng_seed: u64,
    /// SHA-256 of the checkpoint this one was trained from; zeros for none.
    pub predecessor: [u8; 32],
    pub encoder_config: EncoderConfig,
    pub encoder_params: ParamSet,
    pub heads: Option<HeadState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.u32(p.len());
        for t in p.tensors() {
            self.u32(t.ndim());
            for &d in t.shape() {
                self.u32(d);
            }
            for v in t.iter() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = self.u32()?;
            let dims = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            if n * 8 > self.buf.len() - self.pos {
                return Err(Error::Checkpoint("truncated tensor data".into()));
            }
            let values = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(
                ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        }
        Ok(ParamSet::new(tensors))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u8(self.stage.code());
        w.u32(self.epoch as usize);
        w.u64(self.rng_seed);
        w.0.extend_from_slice(&self.predecessor);
        let c = &self.encoder_config;
        w.u32(c.input_size);
        w.u32(c.channels.len());
        for &ch in &c.channels {
            w.u32(ch);
        }
        w.u32(c.embed_dim);
        match &self.heads {
            None => w.u8(0),
            Some(h) => {
                w.u8(1);
                w.u32(h.hidden.0);
                w.u32(h.hidden.1);
            }
        }
        w.params(&self.encoder_params);
        if let Some(h) = &self.heads {
            w.params(&h.params);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let stage = Stage::from_code(r.u8()?)?;
        let epoch = r.u32()? as u32;
        let rng_seed = r.u64()?;
        let predecessor: [u8; 32] = r.take(32)?.try_into().unwrap();
        let input_size = r.u32()?;
        let blocks = r.u32()?;
        if blocks > 64 {
            return Err(Error::Checkpoint(format!("implausible block count {blocks}")));
        }
        let channels = (0..blocks).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let embed_dim = r.u32()?;
        let hidden = match r.u8()? {
            0 => None,
            1 => Some((r.u32()?, r.u32()?)),
            f => return Err(Error::Checkpoint(format!("bad head flag {f}"))),
        };
        let encoder_params = r.params()?;
        let heads = match hidden {
            None => None,
            Some(hidden) => Some(HeadState {
                hidden,
                params: r.params()?,
            }),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            stage,
            epoch,
            rng_seed,
            predecessor,
            encoder_config: EncoderConfig {
                input_size,
                channels,
                embed_dim,
            },
            encoder_params,
            heads,
        })
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn expect_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, got {}",
                allowed.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("/"),
                self.stage
            )))
        }
    }

    /// Checks that `self` was trained from `predecessor`.
    pub fn verify_predecessor(&self, predecessor: &Checkpoint) -> Result<()> {
        if self.predecessor != predecessor.hash() {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint does not descend from the given {} checkpoint",
                self.stage, predecessor.stage
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::rng::seeded;

    fn sample(heads: bool) -> Checkpoint {
        let cfg = EncoderConfig {
            input_size: 8,
            channels: vec![2, 3],
            embed_dim: 4,
        };
        let enc = Encoder::new(cfg.clone(), &mut seeded(3)).unwrap();
        Checkpoint {
            stage: if heads { Stage::Finetune } else { Stage::Pretrain },
            epoch: 7,
            rng_seed: 99,
            predecessor: [5; 32],
            encoder_config: cfg,
            encoder_params: enc.into_params(),
            heads: heads.then(|| HeadState {
                hidden: (3, 2),
                params: ParamSet::new(vec![ArrayD::from_elem(IxDyn(&[2, 3]), 0.25)]),
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for heads in [false, true] {
            let c = sample(heads);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample(false).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn stage_check() {
        let c = sample(false);
        assert!(c.expect_stage(&[Stage::Pretrain]).is_ok());
        assert!(c.expect_stage(&[Stage::Relax]).is_err());
    }
}
