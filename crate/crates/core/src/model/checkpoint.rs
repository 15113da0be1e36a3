//! "SSMC" checkpoints: the model config followed by named f32 tensors.
//!
//! ```text
//! "SSMC" | version u32 = 1 | blob_len u32 | blob (key=value lines)
//! entry_count u32 | entries: name_len u16, name, rank u8, dims u32[rank], f32 data
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::bytes::{put_f32s, put_u16, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

pub const MAGIC: &[u8; 4] = b"SSMC";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let blob = cfg.to_kv();
    put_u32(&mut out, to_u32(blob.len(), "config blob length")?);
    out.extend_from_slice(blob.as_bytes());
    put_u32(&mut out, to_u32(params.len(), "entry count")?);
    for (name, a) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("parameter name too long: {name}")))?;
        put_u16(&mut out, len);
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(a.shape().len()).map_err(|_| Error::contract("tensor rank exceeds 255"))?;
        out.push(rank);
        for &d in a.shape() {
            put_u32(&mut out, to_u32(d, "tensor dim")?);
        }
        put_f32s(&mut out, a.data().iter().map(|v| v.to_f64() as f32));
    }
    Ok(out)
}

/// Parses a checkpoint and checks its tensors against the embedded config.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let blob_len = r.u32("config blob length")? as usize;
    let at = r.pos();
    let blob = std::str::from_utf8(r.take(blob_len, "config blob")?)
        .map_err(|e| Error::format(at, format!("config blob is not UTF-8: {e}")))?;
    let cfg = ModelConfig::from_kv(blob).map_err(|e| Error::format(at, format!("config blob: {e}")))?;
    let count = r.u32("entry count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let at = r.pos();
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::format(at, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let at = r.pos();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, format!("dims of '{name}' overflow")))?;
        let data = r.f32s(n, &format!("data of '{name}'"))?;
        params
            .insert(&name, Array::new(shape, data)?.with_grad())
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    r.finish()?;
    params.check_layout(&cfg)?;
    Ok((cfg, params))
}

pub fn save<T: Real>(path: &Path, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(cfg, params)?;
    // Write then rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("ssmc.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore<f32>)> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint that must have been produced by `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<ParamStore<f32>> {
    let (cfg, params) = load(path)?;
    let diff = expected.diff(&cfg);
    if !diff.is_empty() {
        return Err(Error::config(format!(
            "checkpoint config differs (run vs checkpoint): {}",
            diff.join("; ")
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_count() {
        let cfg = ModelConfig::synthetic();
        let params = ParamStore::<f32>::init(&cfg);
        let (cfg2, p2) = decode(&encode(&cfg, &params).unwrap()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p2.element_count(), params.element_count());
        for (name, a) in params.iter() {
            assert_eq!(p2.get(name).unwrap().data(), a.data());
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let cfg = ModelConfig::synthetic();
        let bytes = encode(&cfg, &ParamStore::<f32>::init(&cfg)).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
        assert!(matches!(decode(b"XXXX"), Err(Error::Format { offset: 0, .. })));
    }
}
