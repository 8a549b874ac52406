//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "EVCAPCK\0"
//! version      u32 LE
//! meta_len     u32 LE, then meta_len bytes of UTF-8 "key=value\n" lines
//! n_records    u32 LE
//! per record:  u32 name_len, name, u32 rank, rank × u32 dims,
//!              product(dims) × f32 LE
//! ```
//!
//! The model hyperparameters are always part of the metadata, so a
//! checkpoint cannot silently be loaded into a differently shaped model.

use std::collections::BTreeMap;
use std::path::Path;

use evcap_core::model::{ModelConfig, ModelParams};
use evcap_core::DenseArray;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"EVCAPCK\0";
pub const FORMAT_VERSION: u32 = 1;

const MODEL_KEYS: [&str; 4] = ["model.steps", "model.channels", "model.d_f", "model.d_h"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: BTreeMap<String, String>,
}

fn model_meta(cfg: &ModelConfig) -> [(&'static str, usize); 4] {
    [(MODEL_KEYS[0], cfg.steps), (MODEL_KEYS[1], cfg.channels), (MODEL_KEYS[2], cfg.d_f), (MODEL_KEYS[3], cfg.d_h)]
}

pub fn encode(params: &ModelParams, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut meta = meta.clone();
    for (k, v) in model_meta(&params.config) {
        meta.insert(k.to_string(), v.to_string());
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, arr) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in arr.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::checkpoint(self.path, format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(BTreeMap<String, String>, BTreeMap<String, DenseArray>)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CliError::checkpoint(path, "not an evcap checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CliError::checkpoint(path, format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let n = c.u32("metadata length")? as usize;
    let text = std::str::from_utf8(c.take(n, "metadata")?)
        .map_err(|_| CliError::checkpoint(path, "metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::checkpoint(path, format!("bad metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let records = c.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..records {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| CliError::checkpoint(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            CliError::checkpoint(path, format!("{name}: shape {dims:?} overflows"))
        })?;
        let payload = c.take(count.saturating_mul(4), &format!("payload of {name}"))?;
        let values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let arr = DenseArray::new(dims, values).map_err(|e| CliError::checkpoint(path, e.to_string()))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(CliError::checkpoint(path, format!("duplicate record {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(CliError::checkpoint(path, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((meta, tensors))
}

fn stored_config(meta: &BTreeMap<String, String>, path: &Path) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::checkpoint(path, format!("metadata lacks a valid {k}")))
    };
    Ok(ModelConfig { steps: get(MODEL_KEYS[0])?, channels: get(MODEL_KEYS[1])?, d_f: get(MODEL_KEYS[2])?, d_h: get(MODEL_KEYS[3])? })
}

/// Decodes a checkpoint and checks it against the expected model shape.
pub fn from_bytes(bytes: &[u8], expected: &ModelConfig, path: &Path) -> Result<Checkpoint> {
    let (meta, tensors) = decode(bytes, path)?;
    let config = stored_config(&meta, path)?;
    let mismatched: Vec<String> = model_meta(&config)
        .iter()
        .zip(model_meta(expected))
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, b)| format!("{} is {} in the checkpoint but {} in the config", a.0, a.1, b.1))
        .collect();
    if !mismatched.is_empty() {
        return Err(CliError::checkpoint(path, format!("hyperparameter mismatch: {}", mismatched.join("; "))));
    }
    let params = ModelParams { config, tensors };
    params.validate().map_err(|e| CliError::checkpoint(path, e.to_string()))?;
    Ok(Checkpoint { params, meta })
}

/// Writes through a temporary file and a rename, so an interrupted save
/// leaves the previous checkpoint intact.
pub fn save(params: &ModelParams, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(params, meta)).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, expected, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ModelParams, BTreeMap<String, String>) {
        let params = ModelParams::init(ModelConfig::toy(), 4).unwrap();
        let meta = BTreeMap::from([("seed".to_string(), "4".to_string()), ("epoch".to_string(), "2".to_string())]);
        (params, meta)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (params, meta) = sample();
        let bytes = encode(&params, &meta);
        let ck = from_bytes(&bytes, &params.config, Path::new("t")).unwrap();
        for (name, arr) in &params.tensors {
            let back = &ck.params.tensors[name];
            assert_eq!(back.shape(), arr.shape());
            assert!(back.values().iter().zip(arr.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(ck.meta["seed"], "4");
        assert_eq!(ck.meta["model.d_h"], "16");
        assert_eq!(encode(&ck.params, &ck.meta), bytes);
    }

    #[test]
    fn every_truncation_fails() {
        let (params, meta) = sample();
        let bytes = encode(&params, &meta);
        for cut in [1, 2, 5, bytes.len() / 2, bytes.len() - 9] {
            let err = from_bytes(&bytes[..bytes.len() - cut], &params.config, Path::new("t")).unwrap_err();
            assert!(matches!(err, CliError::Checkpoint { .. }), "{err}");
        }
    }

    #[test]
    fn version_and_shape_mismatches_fail() {
        let (params, meta) = sample();
        let mut bytes = encode(&params, &meta);
        let mut other = params.config;
        other.d_h = 32;
        let err = from_bytes(&bytes, &other, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("model.d_h"), "{err}");
        bytes[8] = 9;
        let err = from_bytes(&bytes, &params.config, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
