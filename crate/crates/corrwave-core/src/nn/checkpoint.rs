//! Named-tensor checkpoint container.
//!
//! Layout: magic `MBCK`, u8 version, u32 JSON header length, JSON header,
//! raw little-endian payload. The header carries training state (step,
//! seed, config hash) and a manifest of `(name, shape, dtype, offset,
//! byte_len)` per tensor. Tensors are written as f64 so a save/load cycle
//! is bitwise lossless; f32 payloads are accepted on read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

const MAGIC: &[u8; 4] = b"MBCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint(
    store: &ParamStore,
    step: u64,
    seed: u64,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    for entry in store.entries() {
        let offset = payload.len() as u64;
        for &v in entry.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorMeta {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let header = CheckpointHeader {
        step,
        seed,
        config_hash: config_hash.to_string(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(9 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, ArrayD<f64>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 9 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(&format!("unsupported version {}", bytes[4])));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(corrupt("truncated JSON header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &bytes[9 + header_len..];
    let expected: u64 = header
        .tensors
        .iter()
        .map(|t| t.offset + t.byte_len)
        .max()
        .unwrap_or(0);
    if payload.len() as u64 != expected {
        return Err(corrupt(&format!(
            "payload length {} does not match manifest ({expected})",
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let count: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let end = start + meta.byte_len as usize;
        let chunk = &payload[start..end];
        let values: Vec<f64> = match meta.dtype.as_str() {
            "f64" => {
                if chunk.len() != count * 8 {
                    return Err(corrupt(&format!("tensor `{}` byte count", meta.name)));
                }
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            }
            "f32" => {
                if chunk.len() != count * 4 {
                    return Err(corrupt(&format!("tensor `{}` byte count", meta.name)));
                }
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect()
            }
            other => return Err(corrupt(&format!("unknown dtype `{other}`"))),
        };
        let arr = ArrayD::from_shape_vec(meta.shape.clone(), values)
            .map_err(|e| corrupt(&e.to_string()))?;
        tensors.push((meta.name.clone(), arr));
    }
    Ok((header, tensors))
}

/// Load a checkpoint into an existing store, validating names and shapes.
///
/// A config-hash mismatch is refused unless `allow_hash_mismatch` is set.
pub fn load_into_store(
    path: &Path,
    store: &mut ParamStore,
    expected_hash: Option<&str>,
    allow_hash_mismatch: bool,
) -> Result<CheckpointHeader> {
    let (header, tensors) = read_checkpoint(path)?;
    if let Some(expected) = expected_hash {
        if header.config_hash != expected && !allow_hash_mismatch {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint was written under {}, current config is \
                 {expected}; pass the override flag to load anyway",
                header.config_hash
            )));
        }
    }
    for (name, value) in tensors {
        store.load_tensor(&name, value)?;
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    fn sample_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "ckpt-test", 0);
        store.register(
            "enc.w",
            ParamGroup::Trunk,
            crate::nn::init::fan_in_uniform(&[3, 4], 3, &mut rng),
        );
        store.register(
            "head.b",
            ParamGroup::DetectHead,
            crate::nn::init::fan_in_uniform(&[4], 4, &mut rng),
        );
        store
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbck");
        let store = sample_store(1);
        save_checkpoint(&store, 17, 42, "abc123", &path).unwrap();
        let mut loaded = sample_store(2);
        let header = load_into_store(&path, &mut loaded, Some("abc123"), false).unwrap();
        assert_eq!(header.step, 17);
        assert_eq!(header.seed, 42);
        for entry in store.entries() {
            let a = entry.value.as_slice().unwrap();
            let b = loaded.get(&entry.name).as_slice().unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbck");
        let store = sample_store(1);
        save_checkpoint(&store, 0, 0, "h", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let mut target = sample_store(1);
        assert!(load_into_store(&path, &mut target, None, false).is_err());
    }

    #[test]
    fn hash_mismatch_refused_without_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbck");
        let store = sample_store(1);
        save_checkpoint(&store, 0, 0, "old", &path).unwrap();
        let mut target = sample_store(1);
        let err = load_into_store(&path, &mut target, Some("new"), false).unwrap_err();
        assert!(err.to_string().contains("override"));
        load_into_store(&path, &mut target, Some("new"), true).unwrap();
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mbck");
        let store = sample_store(1);
        save_checkpoint(&store, 0, 0, "h", &path).unwrap();
        let mut other = ParamStore::new();
        let mut rng = crate::rng::stream(9, "ckpt-test", 1);
        other.register(
            "enc.w",
            ParamGroup::Trunk,
            crate::nn::init::fan_in_uniform(&[5, 4], 5, &mut rng),
        );
        other.register(
            "head.b",
            ParamGroup::DetectHead,
            crate::nn::init::fan_in_uniform(&[4], 4, &mut rng),
        );
        let err = load_into_store(&path, &mut other, None, false).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }
}
