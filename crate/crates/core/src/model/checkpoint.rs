//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!   magic "STC1" | u32 version | u64 config digest | u32 config JSON length |
//!   config JSON | u64 entry count | entries in path-sorted order |
//!   u64 FNV-1a checksum of everything before it.
//!
//! Each entry: u32 path length | path | u8 trainable | u32 rank |
//! u64 extents... | f64 data...
//!
//! Loading a checkpoint reproduces the parameter bytes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::hash::fnv1a64;

use super::config::ModelConfig;
use super::params::{ModelParameters, ParamEntry};

const MAGIC: &[u8; 4] = b"STC1";
const VERSION: u32 = 1;

fn config_digest(cfg: &ModelConfig) -> u64 {
    fnv1a64(cfg.to_json().as_bytes())
}

pub fn checkpoint_bytes(cfg: &ModelConfig, params: &ModelParameters) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg).to_le_bytes());
    let cfg_json = cfg.to_json();
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_json.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (path, entry) in params.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(entry.trainable as u8);
        out.extend_from_slice(&(entry.grid.rank() as u32).to_le_bytes());
        for &e in entry.grid.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in entry.grid.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save_checkpoint(
    cfg: &ModelConfig,
    params: &ModelParameters,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(cfg, params))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParameters)> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::format("checkpoint truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored_checksum = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored_checksum {
        return Err(Error::format("checkpoint checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let digest = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let cfg_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    let cfg = ModelConfig::from_json(cfg_json)?;
    if config_digest(&cfg) != digest {
        return Err(Error::format("checkpoint config digest mismatch"));
    }
    let count = r.u64()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let path_len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(path_len)?)
            .map_err(|_| Error::format("checkpoint path is not UTF-8"))?
            .to_string();
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let raw = r.take(len * 8)?;
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.insert(path, ParamEntry { grid: ValueGrid::new(shape, data)?, trainable });
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    let params = ModelParameters::from_entries(entries);
    params.matches_config(&cfg)?;
    Ok((cfg, params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParameters)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Load and require the stored config to match `expected` exactly.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelParameters> {
    let (cfg, params) = load_checkpoint(path)?;
    if &cfg != expected {
        return Err(Error::config(
            "checkpoint was written for a different model config",
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 2,
            strides: vec![3, 3],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 42).unwrap();
        let bytes = checkpoint_bytes(&cfg, &params);
        let (cfg2, params2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert!(params.bits_eq(&params2));
        // serialization itself is deterministic
        assert_eq!(bytes, checkpoint_bytes(&cfg2, &params2));
    }

    #[test]
    fn truncation_detected() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 1,
            strides: vec![9],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let bytes = checkpoint_bytes(&cfg, &params);
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(checkpoint_from_bytes(truncated), Err(Error::Format(_))));
    }

    #[test]
    fn corruption_detected() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 1,
            strides: vec![9],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let mut bytes = checkpoint_bytes(&cfg, &params);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_gate() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 1,
            strides: vec![9],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let mut bytes = checkpoint_bytes(&cfg, &params);
        // bump the version field and re-seal the checksum
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let body_len = bytes.len() - 8;
        let checksum = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn config_mismatch_on_load() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 1,
            strides: vec![9],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stc");
        save_checkpoint(&cfg, &params, &path).unwrap();
        let other = ModelConfig { d_model: 32, d_hidden: 64, ..cfg.clone() };
        assert!(load_checkpoint_for(&path, &other).is_err());
        assert!(load_checkpoint_for(&path, &cfg).is_ok());
    }
}
