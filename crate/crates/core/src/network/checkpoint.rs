//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      4 bytes  "MSUP"
//! version    u32      (currently 1)
//! config     u32 byte length + UTF-8 JSON of the ModelConfig
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank x u64 dims
//!              prod(dims) x f64 values
//! stats      u32 count, then per batch-norm layer:
//!              u32 name length + UTF-8 name
//!              u32 channels, channels x f64 running mean,
//!              channels x f64 running variance
//! ```
//!
//! Model parameters use their layer names (`enc0.conv0.weight`, ...).
//! Optimizer state lives in the same tensor table under the `opt/` prefix.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Tensor};

pub const MAGIC: &[u8; 4] = b"MSUP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub stats: Vec<(String, BatchNormStats)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            tensors: model
                .param_names()
                .iter()
                .cloned()
                .zip(model.params().iter().map(|t| {
                    let mut t = t.clone();
                    t.zero_grad();
                    t.set_requires_grad(false);
                    t
                }))
                .collect(),
            stats: model
                .bn_names()
                .iter()
                .cloned()
                .zip(model.bn_stats().iter().cloned())
                .collect(),
        }
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::build(self.config.clone(), 0)?;
        m.load_state(&self.tensors, &self.stats)?;
        Ok(m)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn namespace(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        put_len(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_len(&mut out, t.ndim())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_len(&mut out, self.stats.len())?;
        for (name, s) in &self.stats {
            put_str(&mut out, name)?;
            put_len(&mut out, s.channels())?;
            for v in s.mean.iter().chain(&s.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let count = r.u32()? as usize;
        let mut stats = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ch = r.u32()? as usize;
            let mean = r.f64s(ch)?;
            let var = r.f64s(ch)?;
            stats.push((name, BatchNormStats { mean, var }));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { config, tensors, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::format("checkpoint", "length exceeds u32"))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("binary container", "unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("binary container", "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("binary container", "name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NormMode;

    #[test]
    fn model_survives_round_trip() {
        let mut m = Model::build(ModelConfig::toy(2, 16, 2), 4).unwrap();
        let x = Tensor::from_fn(&[2, 2, 16, 16], |i| (i as f64 * 0.37).sin()).unwrap();
        m.forward(&x, NormMode::Train).unwrap();
        let ck = Checkpoint::from_model(&m);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MSUP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored = back.model().unwrap();
        assert_eq!(restored.infer(&x).unwrap(), m.infer(&x).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::build(ModelConfig::toy(2, 16, 2), 4).unwrap();
        let mut bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
