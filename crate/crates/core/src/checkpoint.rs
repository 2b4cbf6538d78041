//! Model checkpoints.
//!
//! Layout, little-endian: magic `HSCK`, version `u32`, config length `u32`,
//! the model config as TOML, block count `u32`, then per block: name
//! length `u32`, UTF-8 name, rank `u32`, extents `u32` each, and the values
//! as `f32`.

use std::path::Path;

use numerics::{ParamStore, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Self {
        Self {
            config: config.clone(),
            blocks: store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(cfg.len())?);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, len_u32(self.blocks.len())?);
        for (name, t) in &self.blocks {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(t.rank())?);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|e| Error::Config(format!("block name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Config(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, blocks })
    }

    /// Copies every block into `store`, which must have been built from an
    /// identical config.
    pub fn restore<T: Scalar>(&self, config: &ModelConfig, store: &mut ParamStore<T>) -> Result<()> {
        if &self.config != config {
            return Err(Error::CheckpointMismatch("model config differs".into()));
        }
        if self.blocks.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} blocks for {} parameters",
                self.blocks.len(),
                store.len()
            )));
        }
        for (name, t) in &self.blocks {
            let id = store
                .find(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.cast())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{v} exceeds the checkpoint format")))
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
            .ok_or(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
