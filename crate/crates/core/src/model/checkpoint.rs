//! Binary checkpoint format. All integers little-endian.
//!
//! ```text
//! magic     8 bytes  "SDIALCKP"
//! version   u32
//! meta_len  u32, then meta_len bytes of JSON {model, vocab, meta}
//! count     u32, then per tensor:
//!     name_len u32, name bytes, dtype u8, ndim u32, dims u64 * ndim, offset u64
//! payload_len u64, then payload bytes
//! ```
//! Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDIALCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with the vocabulary it was trained on and free-form
/// string metadata (scheme, seed, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub params: ModelParams<T>,
    pub vocab: Vocabulary,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn encode<T: Float>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let header = Header { model: ckpt.params.config().clone(), vocab: ckpt.vocab.clone(), meta: ckpt.meta.clone() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = ckpt.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!("file ends inside {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let json_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header JSON: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_code(r.take(1, "dtype")?[0])
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown dtype for `{name}`")))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        table.push((name, dtype, shape, offset));
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after payload".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, dtype, shape, offset) in table {
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let end = n.checked_mul(size).and_then(|b| b.checked_add(offset)).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` runs past the payload")));
        };
        let raw = &payload[offset..end];
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` holds non-finite values")));
        }
        tensors.insert(name, t);
    }
    if header.vocab.len() != header.model.vocab_size {
        return Err(Error::CorruptCheckpoint(format!(
            "vocabulary has {} entries, model expects {}",
            header.vocab.len(),
            header.model.vocab_size
        )));
    }
    let params = ModelParams::from_tensors(header.model, tensors)?;
    Ok(Checkpoint { params, vocab: header.vocab, meta: header.meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let vocab = Vocabulary::new(["a", "b", "c"]);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 16,
            tokens_per_frame: 1,
            frame_feature_dim: 4,
            projector_hidden: 6,
        };
        let params = ModelParams::init(&cfg, 11).unwrap();
        Checkpoint { params, vocab, meta: BTreeMap::from([("scheme".into(), "streaming".into())]) }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        save_checkpoint(&dir.path().join("again.ckpt"), &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.ckpt")).unwrap());
    }

    #[test]
    fn bumped_version_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(decode::<f32>(&bytes), Err(Error::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let bytes = encode(&sample());
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(decode::<f32>(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn shape_disagreeing_with_config_is_rejected() {
        let ck = sample();
        let mut tensors = ck.params.tensors().clone();
        tensors.insert("final_norm".into(), Tensor::zeros(vec![9]));
        assert!(ModelParams::from_tensors(ck.params.config().clone(), tensors).is_err());
    }

    #[test]
    fn precision_can_change_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let wide: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(wide.params.cast::<f32>(), sample().params);
    }
}
