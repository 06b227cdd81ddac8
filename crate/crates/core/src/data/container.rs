//! Bit-exact tensor container: a JSON manifest next to a binary blob.
//!
//! The blob is a sequence of records, each `u32` rank, `rank * u32` dims,
//! then the elements as little-endian IEEE-754 `f32`. The manifest carries
//! the blob's file name, its SHA-256, and per-record names/offsets. Offsets
//! are strictly increasing; loads verify the checksum and every record
//! boundary, so a truncated or corrupted file fails closed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CONTAINER_VERSION: u32 = 1;

/// Manifest of a named-tensor store (`kind = "tensors"`).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub version: u32,
    pub kind: String,
    pub blob: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (training step, schedule, config echo, ...).
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
}

/// Serializes one tensor record into `out`.
pub fn write_record(out: &mut Vec<u8>, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Deserializes the record at `offset`, returning the tensor and the offset
/// one past its end.
pub fn read_record(blob: &[u8], offset: u64) -> Result<(Tensor<f32>, u64)> {
    let mut pos = usize::try_from(offset)
        .map_err(|_| Error::Format(format!("offset {offset} out of range")))?;
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let end = *pos + 4;
        if end > blob.len() {
            return Err(Error::Format("truncated record header".into()));
        }
        let v = u32::from_le_bytes(blob[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(v)
    };
    let rank = take_u32(&mut pos)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u32(&mut pos)? as usize);
    }
    let count: usize = shape.iter().product();
    let end = pos + 4 * count;
    if end > blob.len() {
        return Err(Error::Format("truncated record data".into()));
    }
    let data = blob[pos..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(shape, data)?, end as u64))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Derives `<base>.json` / `<base>.bin` from a base path; a `.json`
/// extension on the input is treated as the manifest path itself.
pub fn container_paths(base: &Path) -> (PathBuf, PathBuf) {
    if base.extension().is_some_and(|e| e == "json") {
        (base.to_path_buf(), base.with_extension("bin"))
    } else {
        (base.with_extension("json"), base.with_extension("bin"))
    }
}

/// Writes a named-tensor store. Order is preserved; names must be unique.
pub fn save_store(
    base: &Path,
    tensors: &[(String, Tensor<f32>)],
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let (manifest_path, blob_path) = container_paths(base);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            offset: blob.len() as u64,
        });
        write_record(&mut blob, tensor);
    }
    let manifest = StoreManifest {
        version: CONTAINER_VERSION,
        kind: "tensors".into(),
        blob: blob_file_name(&blob_path)?,
        sha256: sha256_hex(&blob),
        tensors: entries,
        meta,
    };
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&manifest_path, &manifest)
}

/// Loads a named-tensor store, verifying version, checksum, and offsets.
pub fn load_store(base: &Path) -> Result<(Vec<(String, Tensor<f32>)>, StoreManifest)> {
    let (manifest_path, _) = container_paths(base);
    let manifest: StoreManifest = read_json(&manifest_path)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {} (expected {})",
            manifest.version, CONTAINER_VERSION
        )));
    }
    if manifest.kind != "tensors" {
        return Err(Error::Format(format!(
            "expected a tensor store, found kind `{}`",
            manifest.kind
        )));
    }
    let blob_path = sibling(&manifest_path, &manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::Format(format!(
            "checksum mismatch for {}",
            blob_path.display()
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut prev_end = 0u64;
    for entry in &manifest.tensors {
        if entry.offset != prev_end {
            return Err(Error::Format(format!(
                "record `{}` at offset {} does not follow the previous record (expected {})",
                entry.name, entry.offset, prev_end
            )));
        }
        let (tensor, end) = read_record(&blob, entry.offset)?;
        prev_end = end;
        out.push((entry.name.clone(), tensor));
    }
    if prev_end != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob has {} trailing bytes after the last record",
            blob.len() as u64 - prev_end
        )));
    }
    Ok((out, manifest))
}

/// Loads a store into a name-keyed map.
pub fn load_store_map(base: &Path) -> Result<(HashMap<String, Tensor<f32>>, StoreManifest)> {
    let (pairs, manifest) = load_store(base)?;
    Ok((pairs.into_iter().collect(), manifest))
}

pub(crate) fn blob_file_name(blob_path: &Path) -> Result<String> {
    blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .map(String::from)
        .ok_or_else(|| Error::Format(format!("bad blob path {}", blob_path.display())))
}

pub(crate) fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN, f32::MAX])
            .unwrap();
        let mut blob = Vec::new();
        write_record(&mut blob, &t);
        let (back, end) = read_record(&blob, 0).unwrap();
        assert_eq!(end as usize, blob.len());
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn store_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("store");
        let tensors = vec![
            ("a".to_string(), Tensor::<f32>::full(vec![2, 2], 1.5)),
            ("b".to_string(), Tensor::<f32>::zeros(vec![3])),
        ];
        save_store(&base, &tensors, Default::default()).unwrap();
        let (loaded, manifest) = load_store(&base).unwrap();
        assert_eq!(manifest.tensors.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[1].1.data(), tensors[1].1.data());

        // corrupt one payload byte: checksum must fail
        let blob_path = base.with_extension("bin");
        let mut bytes = fs::read(&blob_path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&blob_path, &bytes).unwrap();
        assert!(matches!(load_store(&base), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("store");
        let tensors = vec![("x".to_string(), Tensor::<f32>::full(vec![4], 2.0))];
        save_store(&base, &tensors, Default::default()).unwrap();
        let blob_path = base.with_extension("bin");
        let bytes = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_store(&base).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("store");
        let tensors = vec![
            ("x".to_string(), Tensor::<f32>::zeros(vec![1])),
            ("x".to_string(), Tensor::<f32>::zeros(vec![1])),
        ];
        assert!(save_store(&base, &tensors, Default::default()).is_err());
    }
}
