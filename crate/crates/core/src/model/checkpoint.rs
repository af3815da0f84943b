//! Binary checkpoints.
//!
//! Layout (little-endian): `b"VCCK"`, `u32` version, `u32` length plus UTF-8
//! model config text, `u32` record count, then per record `u32` name length,
//! UTF-8 name, `u32` rank, `u32` extents and raw `f32` values.

use std::path::Path;

use super::config::ModelConfig;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::params::{Component, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VCCK";
pub const VERSION: u32 = 1;

/// Component implied by a parameter's name prefix.
pub fn component_of(name: &str) -> Result<Component> {
    let head = name.split('.').next().unwrap_or("");
    Ok(match head {
        "enc" => Component::Encoder,
        "gen_pool" => Component::GenPooler,
        "con_pool" => Component::ConPooler,
        "temporal" => Component::AdaptorExtra,
        "txt" => Component::Decoder,
        "loss" => Component::Loss,
        "vqa" => Component::TaskHead,
        _ => return Err(Error::Format(format!("parameter `{name}` has no known component"))),
    })
}

pub fn to_bytes(config: &ModelConfig, store: &ParameterStore<f32>) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let text = config.to_text();
    w.len_u32(text.len())?;
    w.bytes(text.as_bytes());
    w.len_u32(store.len())?;
    for (name, p) in store.iter() {
        w.len_u32(name.len())?;
        w.bytes(name.as_bytes());
        w.len_u32(p.value.rank())?;
        for &e in p.value.shape() {
            w.len_u32(e)?;
        }
        w.f32s(p.value.data());
    }
    Ok(w.finish())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ParameterStore<f32>)> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.usize32()?;
    let config = ModelConfig::from_text(r.utf8(n)?)?;
    let records = r.usize32()?;
    let mut store = ParameterStore::new();
    for _ in 0..records {
        let n = r.usize32()?;
        let name = r.utf8(n)?.to_string();
        let rank = r.usize32()?;
        let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Format("record size overflows".into()))?;
        let data = r.f32s(numel)?;
        store.insert(&name, Tensor::new(shape, data)?, component_of(&name)?)?;
    }
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok((config, store))
}

pub fn save(path: &Path, config: &ModelConfig, store: &ParameterStore<f32>) -> Result<()> {
    write_file(path, &to_bytes(config, store)?)
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParameterStore<f32>)> {
    from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VideoCoCa;

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = ModelConfig::toy();
        let store = VideoCoCa::new(cfg.clone()).unwrap().init_params::<f32>(3).unwrap();
        let bytes = to_bytes(&cfg, &store).unwrap();
        let (cfg2, store2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(to_bytes(&cfg2, &store2).unwrap(), bytes);
        for (name, p) in store.iter() {
            assert_eq!(store2.get(name).unwrap().component, p.component);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let cfg = ModelConfig::toy();
        let store = VideoCoCa::new(cfg.clone()).unwrap().init_params::<f32>(0).unwrap();
        let bytes = to_bytes(&cfg, &store).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
