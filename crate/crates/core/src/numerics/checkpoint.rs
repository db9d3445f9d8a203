//! Binary checkpoint container.
//!
//! Layout: magic `MAULAB01`, a `u64` little-endian header length, the UTF-8
//! JSON header, then every parameter's values as little-endian `f64` in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"MAULAB01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub config: serde_json::Value,
    pub config_digest: String,
}

impl CheckpointHeader {
    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot of `{}` checkpoint: {e}", self.kind)))
    }
}

pub fn encode_checkpoint(
    kind: &str,
    config: &impl Serialize,
    config_digest: &str,
    store: &ParamStore,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        dtype: "f64-le".to_string(),
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
        config: serde_json::to_value(config)?,
        config_digest: config_digest.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("bad magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut off = 16 + hlen;
    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = bytes.get(off..off + 8 * n).ok_or_else(|| err("truncated parameter data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(err("trailing bytes after parameter data"));
    }
    Ok((header, store))
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &impl Serialize,
    config_digest: &str,
    store: &ParamStore,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(kind, config, config_digest, store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::row(vec![1.5, -2.0]));
        store.add("b", Tensor::scalar(3.0));
        let bytes = encode_checkpoint("vq", &serde_json::json!({"v": 4}), "abc", &store).unwrap();
        assert_eq!(&bytes[..8], b"MAULAB01");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + hlen + 3 * 8);
        assert_eq!(&bytes[16 + hlen..16 + hlen + 8], &1.5f64.to_le_bytes());
        let (h, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h.kind, "vq");
        assert_eq!(h.params[0].shape, vec![1, 2]);
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::row(vec![1.0]));
        let mut bytes = encode_checkpoint("x", &(), "", &store).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
