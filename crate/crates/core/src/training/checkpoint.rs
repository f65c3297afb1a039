//! Binary checkpoint container: magic, version, configuration pairs, then
//! named tensors with their dimensions and little-endian f64 payload.

use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::numerics::RMatrix;
use crate::transformer::{ModelConfig, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MICLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(params: &ModelParams, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    params.check_shapes(&cfg.model)?;
    let mut out = Vec::with_capacity(16 + 8 * params.n_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let pairs = cfg.to_pairs();
    put_u32(&mut out, pairs.len() as u32);
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(&mut out, &name);
        put_u32(&mut out, 2);
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

type RawTensors = Vec<(String, Vec<usize>, Vec<f64>)>;

fn read_raw(path: &Path) -> Result<(TrainConfig, RawTensors)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n_pairs = r.u32()?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        pairs.push((r.string()?, r.string()?));
    }
    let cfg = TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let n_tensors = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, dims, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((cfg, tensors))
}

fn assemble(raw: RawTensors, model: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(model);
    let mut slots = params.tensors_mut();
    if raw.len() != slots.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            slots.len(),
            raw.len()
        )));
    }
    for ((name, dims, data), (expected_name, slot)) in raw.into_iter().zip(slots.iter_mut()) {
        if name != *expected_name {
            return Err(Error::Format(format!("expected tensor `{expected_name}`, found `{name}`")));
        }
        let expected = vec![slot.rows(), slot.cols()];
        if dims != expected {
            return Err(Error::ShapeMismatch {
                name,
                expected,
                found: dims,
            });
        }
        **slot = RMatrix::from_vec(expected[0], expected[1], data)?;
    }
    Ok(params)
}

/// Reads parameters and the full training configuration.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, TrainConfig)> {
    let (cfg, raw) = read_raw(path.as_ref())?;
    let params = assemble(raw, &cfg.model)?;
    Ok((params, cfg))
}

/// Reads parameters, requiring every tensor to have the shape `model`
/// expects.
pub fn load_params_for(path: impl AsRef<Path>, model: &ModelConfig) -> Result<ModelParams> {
    let (_, raw) = read_raw(path.as_ref())?;
    assemble(raw, model)
}
