//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      "MOLECKPT"            8 bytes
//! version    u32
//! count      u32                   number of entries
//! entry*     name_len u16 | name | dtype u8 | rank u8 | extents u64[rank] | raw data
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8. The model config travels as a u8
//! entry named `__config__` holding JSON.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{Precision, Scalar, Tensor};
use crate::model::config::{ModelConfig, Variant};
use crate::model::params::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "__config__";

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

fn put_entry(buf: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize], payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype);
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    buf.extend_from_slice(payload);
}

/// Serializes parameters (and their config) into the container format.
pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((tensors.len() + 1) as u32).to_le_bytes());

    let config = serde_json::to_vec(&params.config).expect("config serializes");
    put_entry(&mut buf, CONFIG_ENTRY, DTYPE_U8, &[config.len()], &config);

    for (name, t) in tensors {
        let (dtype, payload) = match T::PRECISION {
            Precision::Single => (
                DTYPE_F32,
                t.data()
                    .iter()
                    .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
                    .collect::<Vec<_>>(),
            ),
            Precision::Double => (
                DTYPE_F64,
                t.data()
                    .iter()
                    .flat_map(|v| v.as_f64().to_le_bytes())
                    .collect::<Vec<_>>(),
            ),
        };
        put_entry(&mut buf, &name, dtype, t.shape(), &payload);
    }
    buf
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    parse_checkpoint(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Entry<'a> {
    dtype: u8,
    shape: Vec<usize>,
    payload: &'a [u8],
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries: HashMap<String, Entry> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
        }
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            DTYPE_U8 => 1,
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let payload = cur.take(numel)?;
        if entries.insert(name.clone(), Entry { dtype, shape, payload }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - cur.pos
        )));
    }

    let config_entry = entries
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| Error::Checkpoint("missing __config__ entry".into()))?;
    let config: ModelConfig =
        serde_json::from_slice(config_entry.payload).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;

    let mut params = ModelParams::<T>::zeros(&config)?;
    if config.variant == Variant::Mole && !entries.contains_key("layers.0.routed.0.up.weight") {
        for layer in &mut params.layers {
            layer.routed.clear();
            layer.expert_norm = None;
        }
    }
    for (name, slot) in params.tensors_mut() {
        let entry = entries
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                entry.shape,
                slot.shape()
            )));
        }
        let data: Vec<T> = match entry.dtype {
            DTYPE_F32 => entry
                .payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DTYPE_F64 => entry
                .payload
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            _ => return Err(Error::Checkpoint(format!("{name}: not a float tensor"))),
        };
        *slot = Tensor::new(entry.shape, data)?;
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(params)
}
