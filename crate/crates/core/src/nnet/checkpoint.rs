use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Parameters, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind, e.g. `"physio_ae"`.
    pub tag: String,
    /// Model-specific description sufficient to rebuild the shapes.
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub step: u64,
}

/// Named parameter blocks plus metadata.
///
/// Layout (little endian): magic `SRLCKPT\0`, `u32` version, `u64` metadata
/// length and JSON metadata, `u32` block count, then per block a `u32` name
/// length, UTF-8 name, `u32` rank, `u64` dims and raw `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, blocks: Vec::new() }
    }

    /// Appends every parameter of `model` under `prefix.<name>`.
    pub fn push_model<M: Parameters>(&mut self, prefix: &str, model: &M) {
        for (name, t) in model.param_names().into_iter().zip(model.params()) {
            self.blocks.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    /// Copies blocks named `prefix.<name>` into `model`, checking that every
    /// parameter is present with a matching shape.
    pub fn load_model<M: Parameters>(&self, prefix: &str, model: &mut M) -> Result<()> {
        let names = model.param_names();
        for (name, dst) in names.into_iter().zip(model.params_mut()) {
            let key = format!("{prefix}.{name}");
            let (_, src) = self
                .blocks
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing block {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {key} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            if !src.is_finite() {
                return Err(Error::Checkpoint(format!("block {key} holds non-finite values")));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &self.blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let n = read_u32(&mut r)? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            blocks.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
