//! Checkpoint file format: one-line JSON manifest, newline, then the raw
//! little-endian f64 payload concatenated in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NumArray, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step_count: u64,
    pub entries: Vec<(String, Vec<usize>)>,
    /// Architecture metadata supplied by the model that owns the parameters.
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let manifest = Checkpoint {
        version: CHECKPOINT_VERSION,
        step_count: store.step_count,
        entries: store
            .names()
            .map(|n| (n.to_string(), store.value(n).shape.clone()))
            .collect(),
        meta,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    let header = serde_json::to_string(&manifest)?;
    file.write_all(header.as_bytes())?;
    file.write_all(b"\n")?;
    for (name, _) in &manifest.entries {
        for v in &store.value(name).data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest delimiter".into()))?;
    let manifest: Checkpoint = serde_json::from_slice(&bytes[..split])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blob = &bytes[split + 1..];
    let expected: usize = manifest
        .entries
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest expects {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for (name, shape) in &manifest.entries {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&blob[(offset + k) * 8..(offset + k + 1) * 8]);
            data.push(f64::from_le_bytes(buf));
        }
        offset += n;
        store.insert(name.clone(), NumArray::new(shape.clone(), data));
    }
    store.step_count = manifest.step_count;
    Ok((store, manifest.meta))
}

/// SHA-256 of a file, hex-encoded; used for checkpoint provenance.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("a.w", NumArray::new(vec![2, 2], vec![0.1, -0.2, 1e-300, f64::MAX]));
        store.insert("b", NumArray::vector(vec![std::f64::consts::PI]));
        store.step_count = 17;
        save_checkpoint(&path, &store, serde_json::json!({"kind": "test"})).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert!(loaded.bit_identical(&store));
        assert_eq!(loaded.step_count, 17);
        assert_eq!(meta["kind"], "test");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", NumArray::vector(vec![1.0, 2.0]));
        save_checkpoint(&path, &store, serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
