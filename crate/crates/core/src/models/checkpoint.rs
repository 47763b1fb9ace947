//! Binary checkpoints: magic, version, a JSON header with the model config,
//! one record per parameter and a trailing CRC32 over everything before it.

use std::path::Path;

use cslid_tensor::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{io_err, CoreError, Result};

const MAGIC: &[u8; 4] = b"CSLD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Validation balanced accuracy, when one was measured.
    pub metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn encode<S: Float>(model: &Model<S>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config(),
        meta: meta.clone(),
    })
    .map_err(|e| CoreError::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    let store = model.store();
    put_u32(&mut out, store.len());
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        put_u32(&mut out, shape.len());
        for &d in shape {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CoreError::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a checkpoint, checking its CRC and, when `expected` is given,
/// that it was written for that model config.
pub fn decode<S: Float>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model<S>, CheckpointMeta)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(CoreError::Integrity("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(CoreError::Integrity(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CoreError::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CoreError::Integrity(format!("checkpoint header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(CoreError::ConfigMismatch {
                expected: serde_json::to_string(exp).unwrap_or_default(),
                found: serde_json::to_string(&header.config).unwrap_or_default(),
            });
        }
    }
    let mut model = Model::<S>::new(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()?;
    if count != model.store().len() {
        return Err(CoreError::Integrity(format!(
            "checkpoint has {count} parameters, model has {}",
            model.store().len()
        )));
    }
    let store = model.store_mut();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CoreError::Integrity("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let id = store
            .id_of(&name)
            .ok_or_else(|| CoreError::Integrity(format!("unknown parameter {name}")))?;
        let param = store.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(CoreError::Integrity(format!(
                "parameter {name} has shape {shape:?}, model expects {:?}",
                param.value.shape()
            )));
        }
        let numel = param.value.numel();
        let raw = r.take(numel * 4)?;
        for (dst, b) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = S::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    if r.pos != body.len() {
        return Err(CoreError::Integrity("trailing bytes after parameters".into()));
    }
    Ok((model, header.meta))
}

pub fn save<S: Float>(path: &Path, model: &Model<S>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load<S: Float>(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model<S>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, expected)
}
