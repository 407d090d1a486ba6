//! Manifest-plus-blob container: a directory with `manifest.json` (UTF-8,
//! one JSON object describing typed array records) and `data.bin`
//! (concatenated little-endian blobs in manifest order). Used for both
//! dataset and checkpoint storage; round-trips are bit-exact at 32-bit.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported container format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("integrity error in record '{record}': {detail}")]
    Integrity { record: String, detail: String },
    #[error("no record named '{0}'")]
    MissingRecord(String),
    #[error("record '{record}' has dtype {found:?}, expected {expected:?}")]
    DTypeMismatch { record: String, found: DType, expected: DType },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

impl DType {
    pub fn byte_width(&self) -> u64 {
        4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub records: Vec<BlobRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Accumulates records in order, then writes the directory atomically
/// (write-to-temp-then-rename for both files).
pub struct ContainerWriter {
    records: Vec<BlobRecord>,
    buf: Vec<u8>,
}

impl Default for ContainerWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl ContainerWriter {
    pub fn new() -> Self {
        ContainerWriter { records: Vec::new(), buf: Vec::new() }
    }

    /// Append an f64 array stored as little-endian f32.
    pub fn push_f32(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "push_f32 '{name}': shape/data mismatch");
        let offset = self.buf.len() as u64;
        for &v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.records.push(BlobRecord {
            name: name.to_string(),
            dtype: DType::F32,
            shape,
            offset,
            byte_len: data.len() as u64 * 4,
        });
    }

    pub fn push_i32(&mut self, name: &str, shape: Vec<usize>, data: &[i32]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "push_i32 '{name}': shape/data mismatch");
        let offset = self.buf.len() as u64;
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.records.push(BlobRecord {
            name: name.to_string(),
            dtype: DType::I32,
            shape,
            offset,
            byte_len: data.len() as u64 * 4,
        });
    }

    pub fn finish(
        self,
        dir: &Path,
        kind: &str,
        meta: serde_json::Value,
    ) -> Result<(), ContainerError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            records: self.records,
            meta,
        };
        fs::create_dir_all(dir).map_err(|e| ContainerError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_atomic(&dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?.as_slice())?;
        write_atomic(&dir.join("data.bin"), &self.buf)?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let tmp = path.with_extension("tmp");
    let io = |source| ContainerError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// A loaded container with validated record table.
#[derive(Debug)]
pub struct Container {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl Container {
    /// Parse and validate from raw bytes. This is the untrusted-input entry
    /// point; every record's extent is checked against the data length.
    pub fn from_parts(manifest_bytes: &[u8], data: Vec<u8>) -> Result<Container, ContainerError> {
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ContainerError::Version {
                found: manifest.format_version,
                supported: FORMAT_VERSION,
            });
        }
        for r in &manifest.records {
            let numel = r.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let expected = numel.map(|n| n as u64 * r.dtype.byte_width());
            if expected != Some(r.byte_len) {
                return Err(ContainerError::Integrity {
                    record: r.name.clone(),
                    detail: format!("shape {:?} inconsistent with byte_len {}", r.shape, r.byte_len),
                });
            }
            let end = r.offset.checked_add(r.byte_len);
            if end.is_none() || end.unwrap() > data.len() as u64 {
                return Err(ContainerError::Integrity {
                    record: r.name.clone(),
                    detail: format!(
                        "extent {}..{:?} exceeds data length {}",
                        r.offset,
                        end,
                        data.len()
                    ),
                });
            }
        }
        Ok(Container { manifest, data })
    }

    pub fn open(dir: &Path) -> Result<Container, ContainerError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| ContainerError::Io { path: p.clone(), source }
        };
        let mpath = dir.join("manifest.json");
        let dpath = dir.join("data.bin");
        let manifest_bytes = fs::read(&mpath).map_err(io(&mpath))?;
        let data = fs::read(&dpath).map_err(io(&dpath))?;
        Container::from_parts(&manifest_bytes, data)
    }

    pub fn record(&self, name: &str) -> Result<&BlobRecord, ContainerError> {
        self.manifest
            .records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| ContainerError::MissingRecord(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.manifest.records.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn read_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), ContainerError> {
        let r = self.record(name)?;
        if r.dtype != DType::F32 {
            return Err(ContainerError::DTypeMismatch {
                record: name.to_string(),
                found: r.dtype,
                expected: DType::F32,
            });
        }
        let bytes = &self.data[r.offset as usize..(r.offset + r.byte_len) as usize];
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((r.shape.clone(), vals))
    }

    pub fn read_i32(&self, name: &str) -> Result<(Vec<usize>, Vec<i32>), ContainerError> {
        let r = self.record(name)?;
        if r.dtype != DType::I32 {
            return Err(ContainerError::DTypeMismatch {
                record: name.to_string(),
                found: r.dtype,
                expected: DType::I32,
            });
        }
        let bytes = &self.data[r.offset as usize..(r.offset + r.byte_len) as usize];
        let vals = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((r.shape.clone(), vals))
    }
}
