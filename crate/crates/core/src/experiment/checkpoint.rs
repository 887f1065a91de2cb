//! Binary checkpoints.
//!
//! Layout (little-endian): magic `GZRF`, u32 version, u32 length + UTF-8
//! model config, u32 entry count, then per entry u32 name length, name,
//! u32 ndim, ndim x u32 dims, f32 payload; finally u32 epoch, u64 seed,
//! f64 final learning rate.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{io_err, ExperimentError};
use crate::nn::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GZRF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: u32,
    pub seed: u64,
    pub final_lr: f64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn checkpoint_to_bytes(model: &Model<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch = model.config().to_config_string();
    put_u32(&mut out, arch.len());
    out.extend_from_slice(arch.as_bytes());
    let entries: Vec<(&str, &Tensor<f32>)> = model.store().named_tensors().collect();
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims().len());
        for &d in t.dims() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.final_lr.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExperimentError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ExperimentError::Checkpoint(format!(
                "truncated checkpoint: expected at least {} bytes, file has {}",
                self.pos.saturating_add(n),
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ExperimentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ExperimentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, ExperimentError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ExperimentError::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta), ExperimentError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ExperimentError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ExperimentError::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let arch = c.string("model config")?;
    let config = ModelConfig::from_config_str(&arch)?;
    let mut model = Model::<f32>::build(&config, 0)?;
    let expected = model.store().named_tensors().count();
    let count = c.u32()? as usize;
    if count != expected {
        return Err(ExperimentError::Checkpoint(format!(
            "checkpoint has {count} tensors, the model has {expected}"
        )));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name = c.string("tensor name")?;
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let payload = c.take(numel.checked_mul(4).ok_or_else(|| {
            ExperimentError::Checkpoint(format!("tensor `{name}` dims {dims:?} overflow"))
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(ExperimentError::Checkpoint(format!("tensor `{name}` appears twice")));
        }
        model.store_mut().assign(&name, Tensor::from_vec(&dims, data)?)?;
    }
    let meta = CheckpointMeta {
        epoch: c.u32()?,
        seed: c.u64()?,
        final_lr: f64::from_bits(c.u64()?),
    };
    if c.pos != bytes.len() {
        return Err(ExperimentError::Checkpoint(format!(
            "{} trailing bytes after checkpoint metadata",
            bytes.len() - c.pos
        )));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, checkpoint_to_bytes(model, meta)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta), ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        ExperimentError::Checkpoint(m) => ExperimentError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
