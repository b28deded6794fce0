//! Weight file format "SPW1": magic, format version u32 LE, entry count
//! u32 LE; per entry a u16 LE name length + UTF-8 name, rank u8, extents as
//! u32 LE each, then the payload as fp32 LE row-major with no padding.
//!
//! The architecture config rides along as a `__meta.config` entry (u32
//! words in fp32-sized slots) so a weight file is self-describing; meta
//! entries are not model parameters and are stripped on load.

use super::{ModelConfig, ModelWeights};
use crate::tensor::Scalar;
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SPW1";
const VERSION: u32 = 1;
const META_CONFIG: &str = "__meta.config";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a SPW1 file")]
    BadMagic,
    #[error("unsupported SPW1 version {0}")]
    BadVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("entry `{0}` has a zero extent")]
    ZeroExtent(String),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("missing or malformed `__meta.config` entry")]
    BadMeta,
}

pub(crate) struct RawEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// numel × 4 bytes, little-endian 32-bit words.
    pub payload: Vec<u8>,
}

pub(crate) fn write_container(path: &Path, entries: &[RawEntry]) -> Result<(), WeightsError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        let numel: usize = e.shape.iter().product();
        assert_eq!(e.payload.len(), numel * 4, "payload size mismatch for {}", e.name);
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&e.payload);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        if self.pos + n > self.data.len() {
            return Err(WeightsError::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }
}

pub(crate) fn read_container(path: &Path) -> Result<Vec<RawEntry>, WeightsError> {
    let data = fs::read(path)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(WeightsError::BadVersion(version));
    }
    let count = cur.u32()? as usize;
    let mut names = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| WeightsError::BadName)?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(WeightsError::DuplicateName(name));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(WeightsError::ZeroExtent(name));
            }
            shape.push(d);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?.to_vec();
        entries.push(RawEntry { name, shape, payload });
    }
    if cur.pos != data.len() {
        return Err(WeightsError::Truncated);
    }
    Ok(entries)
}

pub(crate) fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn u32s_to_bytes(words: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 4);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn bytes_to_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn encode_config(c: &ModelConfig) -> Vec<u32> {
    let mut w: Vec<u32> = Vec::with_capacity(28);
    let mut push_usize = |v: usize| w.push(v as u32);
    push_usize(c.base_channels);
    push_usize(c.patch_size);
    push_usize(c.window);
    push_usize(c.embed_dim);
    for v in c.heads_spatial {
        push_usize(v);
    }
    for v in c.heads_channel {
        push_usize(v);
    }
    for v in c.enc_blocks {
        push_usize(v);
    }
    for v in c.dec_blocks {
        push_usize(v);
    }
    push_usize(c.refine_blocks);
    for v in c.spatial_blocks {
        push_usize(v);
    }
    push_usize(c.use_gcfn as usize);
    for f in [c.ffn_expansion, c.mlp_ratio, c.ln_eps] {
        let bits = f.to_bits();
        w.push((bits >> 32) as u32);
        w.push(bits as u32);
    }
    w
}

fn decode_config(words: &[u32]) -> Result<ModelConfig, WeightsError> {
    if words.len() != 28 {
        return Err(WeightsError::BadMeta);
    }
    let mut it = words.iter().copied();
    let mut next = || it.next().unwrap() as usize;
    let base_channels = next();
    let patch_size = next();
    let window = next();
    let embed_dim = next();
    let heads_spatial = [next(), next()];
    let heads_channel = [next(), next(), next(), next()];
    let enc_blocks = [next(), next(), next(), next()];
    let dec_blocks = [next(), next(), next(), next()];
    let refine_blocks = next();
    let spatial_blocks = [next(), next()];
    let use_gcfn = next() != 0;
    let mut next_f64 = || {
        let hi = it.next().unwrap() as u64;
        let lo = it.next().unwrap() as u64;
        f64::from_bits((hi << 32) | lo)
    };
    let ffn_expansion = next_f64();
    let mlp_ratio = next_f64();
    let ln_eps = next_f64();
    Ok(ModelConfig {
        base_channels,
        patch_size,
        window,
        embed_dim,
        heads_spatial,
        heads_channel,
        enc_blocks,
        dec_blocks,
        refine_blocks,
        spatial_blocks,
        ffn_expansion,
        mlp_ratio,
        use_gcfn,
        ln_eps,
    })
}

/// Write weights (and their config) to a SPW1 file. Values are stored as
/// fp32; the roundtrip is bit-exact for f32 weights.
pub fn save_weights<T: Scalar>(weights: &ModelWeights<T>, path: &Path) -> Result<(), WeightsError> {
    let meta = encode_config(&weights.config);
    let mut entries = vec![RawEntry {
        name: META_CONFIG.to_string(),
        shape: vec![meta.len()],
        payload: u32s_to_bytes(&meta),
    }];
    for e in weights.entries() {
        let f32s: Vec<f32> = e.values.iter().map(|v| v.to_f64() as f32).collect();
        entries.push(RawEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            payload: f32s_to_bytes(&f32s),
        });
    }
    write_container(path, &entries)
}

/// Read a SPW1 weight file back into f32 weights plus the embedded config.
pub fn load_weights(path: &Path) -> Result<ModelWeights<f32>, WeightsError> {
    let raw = read_container(path)?;
    let meta = raw
        .iter()
        .find(|e| e.name == META_CONFIG)
        .ok_or(WeightsError::BadMeta)?;
    let config = decode_config(&bytes_to_u32s(&meta.payload))?;
    let mut weights = ModelWeights::empty(config);
    for e in raw {
        if e.name.starts_with("__meta.") {
            continue;
        }
        weights.push_entry(e.name, e.shape.clone(), bytes_to_f32s(&e.payload));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::micro_config;
    use crate::model::build;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_exact_for_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.spw");
        let w = build::<f32>(&micro_config(), 11).unwrap();
        save_weights(&w, &path).unwrap();
        let r = load_weights(&path).unwrap();
        assert_eq!(r.config, w.config);
        assert_eq!(r.entries().len(), w.entries().len());
        for (a, b) in w.entries().iter().zip(r.entries().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.spw");
        let w = build::<f32>(&micro_config(), 11).unwrap();
        save_weights(&w, &path).unwrap();
        let mut data = std::fs::read(&path).unwrap();
        data[0] = b'X';
        std::fs::write(&path, data).unwrap();
        assert!(matches!(load_weights(&path), Err(WeightsError::BadMagic)));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.spw");
        let w = build::<f32>(&micro_config(), 11).unwrap();
        save_weights(&w, &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() - 3]).unwrap();
        assert!(matches!(load_weights(&path), Err(WeightsError::Truncated)));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.spw");
        let w = build::<f32>(&micro_config(), 11).unwrap();
        save_weights(&w, &path).unwrap();
        let mut data = std::fs::read(&path).unwrap();
        data[4] = 9;
        std::fs::write(&path, data).unwrap();
        assert!(matches!(load_weights(&path), Err(WeightsError::BadVersion(_))));
    }
}
