//! Versioned binary checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PFCK"
//! 4       4     format version (u32), currently 1
//! 8       4     config length L (u32)
//! 12      L     run config, UTF-8, canonical key=value text
//! 12+L    4     parameter count N (u32)
//! then, N times, sorted by name ascending:
//!         4     name length (u32)
//!         ..    name, UTF-8
//!         4     rank R (u32)
//!         8*R   dimensions (u64 each)
//!         8*n   values (f64 bit patterns), n = product of dims
//! ```
//!
//! The embedded config makes a checkpoint self-describing: loading rebuilds
//! the model skeleton from it and then requires the stored parameter set to
//! match the skeleton exactly, name for name and shape for shape.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    if end > bytes.len() {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let v = u32::from_le_bytes(bytes[*at..end].try_into().unwrap());
    *at = end;
    Ok(v)
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    if end > bytes.len() {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let v = u64::from_le_bytes(bytes[*at..end].try_into().unwrap());
    *at = end;
    Ok(v)
}

/// Serialize config plus parameters.
pub fn encode(config: &RunConfig, params: &ModelParams) -> Vec<u8> {
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    params.visit(&mut |name, t| {
        named.insert(name, t.clone());
    });
    let config_text = config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    push_u32(&mut out, named.len() as u32);
    for (name, tensor) in &named {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint back into its config and parameters.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, ModelParams)> {
    let mut at = 0usize;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    at += 4;
    let version = read_u32(bytes, &mut at)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config_len = read_u32(bytes, &mut at)? as usize;
    if at + config_len > bytes.len() {
        return Err(Error::Checkpoint("truncated config".into()));
    }
    let config_text = std::str::from_utf8(&bytes[at..at + config_len])
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::parse_str(config_text)?;
    at += config_len;

    let count = read_u32(bytes, &mut at)? as usize;
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(bytes, &mut at)? as usize;
        if at + name_len > bytes.len() {
            return Err(Error::Checkpoint("truncated name".into()));
        }
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        at += name_len;
        let rank = read_u32(bytes, &mut at)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(bytes, &mut at)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_bits(read_u64(bytes, &mut at)?));
        }
        let tensor = Tensor::new(values, &shape).map_err(|e| {
            Error::Checkpoint(format!("parameter `{name}`: {e}"))
        })?;
        stored.insert(name, tensor);
    }
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - at
        )));
    }

    // Rebuild the skeleton from the embedded config and fill it by name.
    let model_config = ModelConfig::from_section(&config.model)?;
    let mut params = ModelParams::init(&mut Rng::seeded(0), &model_config);
    let mut expected: Vec<String> = Vec::new();
    params.visit(&mut |name, _| expected.push(name));
    expected.sort();
    let stored_names: Vec<&String> = stored.keys().collect();
    if expected.iter().collect::<Vec<_>>() != stored_names {
        return Err(Error::Checkpoint(format!(
            "parameter set mismatch: config implies {:?}, file holds {:?}",
            expected,
            stored.keys().collect::<Vec<_>>()
        )));
    }
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let loaded = &stored[&name];
        if loaded.shape() != tensor.shape() {
            failure = Some(Error::Checkpoint(format!(
                "parameter `{name}`: shape {:?} in file, {:?} expected",
                loaded.shape(),
                tensor.shape()
            )));
            return;
        }
        *tensor = loaded.clone();
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &RunConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(config, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
