//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "HEBB"                    4 bytes magic
//! version                   u32
//! layer count               u32
//! per layer:
//!   name length, name       u32, UTF-8 bytes
//!   rank, dims              u32, u32 * rank
//!   weights                 f32 * prod(dims)
//! crc32                     u32, IEEE CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::segnet::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HEBB";
pub const VERSION: u32 = 1;

/// One named weight array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub weights: Tensor,
}

pub fn encode(records: &[LayerRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.weights.shape().len() as u32).to_le_bytes());
        for &d in r.weights.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in r.weights.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<LayerRecord>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Truncated(at))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated(at))?;
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(at))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let weights = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated(at))?;
        records.push(LayerRecord { name, weights });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated(r.pos));
    }
    Ok(records)
}

pub fn network_records(net: &Network) -> Vec<LayerRecord> {
    net.layers()
        .iter()
        .map(|l| LayerRecord {
            name: l.name.clone(),
            weights: l.weights.clone(),
        })
        .collect()
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(&network_records(net)))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<LayerRecord>> {
    Ok(decode(&fs::read(path)?)?)
}

/// Load a checkpoint into a network of the given spec. Names and shapes must
/// match the spec layer for layer.
pub fn load_checkpoint(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Network> {
    let records = read_checkpoint(path)?;
    network_from_records(records, spec)
}

pub fn network_from_records(records: Vec<LayerRecord>, spec: &NetworkSpec) -> Result<Network> {
    let mut net = Network::init(spec.clone(), 0)?;
    let plan_len = net.layers().len();
    {
        let layers = net.layers_mut();
        for (i, layer) in layers.iter_mut().enumerate() {
            let Some(rec) = records.get(i) else {
                return Err(CheckpointError::ShapeMismatch {
                    layer: layer.name.clone(),
                    detail: "missing from checkpoint".into(),
                }
                .into());
            };
            if rec.name != layer.name || rec.weights.shape() != layer.weights.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    layer: layer.name.clone(),
                    detail: format!(
                        "checkpoint has `{}` with shape {:?}, network expects shape {:?}",
                        rec.name,
                        rec.weights.shape(),
                        layer.weights.shape()
                    ),
                }
                .into());
            }
            layer.weights = rec.weights.clone();
        }
    }
    if records.len() > plan_len {
        return Err(CheckpointError::ShapeMismatch {
            layer: records[plan_len].name.clone(),
            detail: "not part of the network".into(),
        }
        .into());
    }
    Network::from_layers(spec.clone(), net.layers().to_vec())
}
