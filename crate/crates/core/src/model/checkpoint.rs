//! Binary weight container.
//!
//! ```text
//! magic     8 bytes  "SKVDCKPT"
//! version   u32 LE   (1)
//! hdr_len   u32 LE
//! header    JSON     {"config": UetdConfig, "meta": {string: string}}
//! n_blocks  u32 LE
//! block*    name_len u16 LE, name utf-8, rows u32 LE, cols u32 LE, rows*cols f64 LE
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Blocks appear in [`Params::visit`] order. Loading checks the digest, then
//! that every block name and shape matches what the header config implies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Params, UetdWeights};
use super::UetdConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKVDCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: UetdConfig,
    meta: BTreeMap<String, String>,
}

pub fn write_checkpoint(weights: &UetdWeights, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: weights.config,
        meta: meta.clone(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut blocks = Vec::new();
    weights.visit("", &mut |name, m| blocks.push((name, m)));
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(UetdWeights, BTreeMap<String, String>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let mut blocks = BTreeMap::new();
    let n = r.u32()?;
    for _ in 0..n {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("block name is not utf-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.insert(name, (rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after blocks".into()));
    }
    let mut weights = UetdWeights::zeros(header.config);
    let mut problem = None;
    let mut expected = 0;
    weights.visit_mut("", &mut |name, m| {
        expected += 1;
        match blocks.remove(&name) {
            Some((rows, cols, data)) if (rows, cols) == m.shape() => {
                m.as_mut_slice().copy_from_slice(&data);
            }
            Some((rows, cols, _)) => {
                problem.get_or_insert(format!(
                    "block {name} is {rows}x{cols}, config expects {:?}",
                    m.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("missing block {name}"));
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Shape(p));
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Shape(format!("unexpected block {extra} ({} expected)", expected)));
    }
    Ok((weights, header.meta))
}

pub fn save_checkpoint(path: &Path, weights: &UetdWeights, meta: &BTreeMap<String, String>) -> Result<()> {
    crate::io::write_atomic(path, &write_checkpoint(weights, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(UetdWeights, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// SHA-256 over the names and bytes of every block whose name starts with `prefix`.
pub fn group_digest(weights: &UetdWeights, prefix: &str) -> String {
    let mut h = Sha256::new();
    weights.visit("", &mut |name, m| {
        if name.starts_with(prefix) {
            h.update(name.as_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UetdConfig {
        UetdConfig {
            n_heads: 2,
            n_layers: 1,
            ff_dim: 16,
            model_dim: 8,
            token_dim: 4,
            n_tokens: 4,
            dropout: 0.1,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let w = UetdWeights::init(tiny(), 9).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("scheme".to_string(), "st-prp".to_string());
        let bytes = write_checkpoint(&w, &meta);
        let (back, m) = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(m, meta);
        assert_eq!(group_digest(&back, "encoder."), group_digest(&w, "encoder."));
    }

    #[test]
    fn corruption_detected() {
        let w = UetdWeights::init(tiny(), 9).unwrap();
        let mut bytes = write_checkpoint(&w, &BTreeMap::new());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(b"garbage").is_err());
    }

    #[test]
    fn digest_separates_groups() {
        let w = UetdWeights::init(tiny(), 1).unwrap();
        let mut v = w.clone();
        v.ftd.queries.set(0, 0, 42.0);
        assert_eq!(group_digest(&w, "encoder."), group_digest(&v, "encoder."));
        assert_ne!(group_digest(&w, "ftd."), group_digest(&v, "ftd."));
    }
}
