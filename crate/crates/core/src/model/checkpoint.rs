//! Checkpoint layout: `PLGDCKPT`, u32 header length, JSON header, every
//! parameter as little-endian f32 in header order, then a SHA-256 of all
//! preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backbone, ModelConfig, ParamSet};
use crate::adapt::AdapterConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PLGDCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    adapter: Option<AdapterConfig>,
    base_hash: Option<[u8; 32]>,
    params: Vec<(String, Vec<usize>)>,
}

pub fn write_checkpoint(model: &Backbone) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        adapter: model.adapter.clone(),
        base_hash: model.base_hash,
        params: model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.params.num_weights() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Backbone> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file corrupt or truncated)"));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    header.config.validate()?;
    let mut data = &body[12 + hlen..];
    let mut params = ParamSet::new();
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        if data.len() < 4 * n {
            return Err(bad("parameter data truncated"));
        }
        let vals = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        data = &data[4 * n..];
        params.insert(name, Tensor::new(shape, vals)?);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(Backbone {
        config: header.config,
        params,
        adapter: header.adapter,
        base_hash: header.base_hash,
    })
}

/// Writes atomically (temp file, then rename).
pub fn save_checkpoint(model: &Backbone, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &write_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        let mut cfg = ModelConfig::toy(120);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.max_len = 16;
        Backbone::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact_after_rounding() {
        let mut m = tiny();
        m.round_to_f32();
        m.pin_lineage();
        let back = read_checkpoint(&write_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn corruption_is_detected() {
        let m = tiny();
        let mut bytes = write_checkpoint(&m);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        let bytes = write_checkpoint(&m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    }
}
