//! The `AVCK` checkpoint format.
//!
//! Magic `AVCK`, `u32` version, 32-byte config hash, `u64` epoch, `u32`
//! length-prefixed JSON metadata, the parameter table (name, rank, `u64`
//! dims, `f64` values), optimizer moments, and a trailing CRC32 of all
//! preceding bytes. Little-endian throughout.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::optim::Moments;
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Tensor};

use super::container::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.buf.extend_from_slice(&self.config_hash);
        w.u64(self.epoch);
        w.str(&serde_json::to_string(&self.meta)?);
        w.len(self.params.len());
        for (name, t) in self.params.iter() {
            w.str(name);
            w.len(t.shape().len());
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.str(&serde_json::to_string(&opt.cfg)?);
                w.u64(opt.step);
                w.len(opt.state.len());
                for (name, m) in &opt.state {
                    w.str(name);
                    w.u64(m.m.len() as u64);
                    w.f64s(&m.m);
                    w.f64s(&m.v);
                }
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::format("checkpoint", "checksum mismatch"));
        }
        let mut r = Reader::new("checkpoint", body);
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let meta = serde_json::from_str(&r.str()?)?;
        let n = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.len()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let count = shape.iter().product();
            params.insert(name, Tensor::new(shape, r.f64s(count)?)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let cfg: AdamWConfig = serde_json::from_str(&r.str()?)?;
                let step = r.u64()?;
                let k = r.len()?;
                let mut state = BTreeMap::new();
                for _ in 0..k {
                    let name = r.str()?;
                    let len = r.u64()? as usize;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    state.insert(name, Moments { m, v });
                }
                Some(AdamW { cfg, step, state })
            }
            f => return Err(Error::format("checkpoint", format!("optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Checkpoint {
            config_hash,
            epoch,
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
