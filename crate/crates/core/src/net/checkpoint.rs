//! Checkpoint layout: the magic `NVF1`, a little-endian `u32` header length,
//! the JSON-encoded [`ModelMeta`], then every parameter as a little-endian
//! `f32` in flat-vector order. Nothing else; trailing bytes are an error.

use std::path::Path;

use super::{ModelMeta, ModelParams, Weights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVF1";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&params.meta).expect("metadata serializes");
    let weights = params.weights.as_slice();
    let mut out = Vec::with_capacity(8 + header.len() + 4 * weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let meta: ModelMeta = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    meta.validate()?;
    let raw = &body[header_len..];
    let expected = 4 * meta.param_count;
    if raw.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes of weights, found {}",
            raw.len()
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("parameter {i} is not finite")));
    }
    let weights = Weights::from_vec(meta.k, data)?;
    Ok(ModelParams { meta, weights })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
