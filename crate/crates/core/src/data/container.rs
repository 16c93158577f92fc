//! Directory container: a JSON `manifest` plus one little-endian blob file
//! per array under `blobs/`.
//!
//! Each blob file is an 8-byte little-endian element count followed by the
//! elements in little-endian order. The manifest records every blob's dtype,
//! element count and the SHA-256 of the whole file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Blob {
    pub fn dtype(&self) -> &'static str {
        match self {
            Blob::F32(_) => "f32",
            Blob::F64(_) => "f64",
            Blob::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Blob::F32(v) => v.len(),
            Blob::F64(v) => v.len(),
            Blob::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * 8);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        match self {
            Blob::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    fn from_bytes(name: &str, dtype: &str, bytes: &[u8]) -> Result<Self> {
        let width = dtype_width(dtype).ok_or_else(|| Error::Data(format!("blob `{name}` has unknown dtype {dtype}")))?;
        if bytes.len() < 8 {
            return Err(Error::Truncated(name.to_string()));
        }
        let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != count * width {
            return Err(Error::Truncated(name.to_string()));
        }
        Ok(match dtype {
            "f32" => Blob::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            "f64" => Blob::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
            _ => Blob::U32(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect()),
        })
    }
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" | "u32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub dtype: String,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    byte_order: String,
    meta: serde_json::Value,
    blobs: BTreeMap<String, BlobInfo>,
}

/// In-memory form of a container directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: BTreeMap<String, Blob>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            blobs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, blob: Blob) {
        self.blobs.insert(name.to_string(), blob);
    }

    pub fn take(&mut self, name: &str) -> Result<Blob> {
        self.blobs
            .remove(name)
            .ok_or_else(|| Error::Data(format!("container has no blob `{name}`")))
    }

    pub fn take_f32(&mut self, name: &str) -> Result<Vec<f32>> {
        match self.take(name)? {
            Blob::F32(v) => Ok(v),
            b => Err(Error::Data(format!("blob `{name}` is {}, expected f32", b.dtype()))),
        }
    }

    pub fn take_f64(&mut self, name: &str) -> Result<Vec<f64>> {
        match self.take(name)? {
            Blob::F64(v) => Ok(v),
            b => Err(Error::Data(format!("blob `{name}` is {}, expected f64", b.dtype()))),
        }
    }

    pub fn take_u32(&mut self, name: &str) -> Result<Vec<u32>> {
        match self.take(name)? {
            Blob::U32(v) => Ok(v),
            b => Err(Error::Data(format!("blob `{name}` is {}, expected u32", b.dtype()))),
        }
    }

    /// Writes blobs first and the manifest last.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let blob_dir = dir.join(BLOB_DIR);
        fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
        let mut infos = BTreeMap::new();
        for (name, blob) in &self.blobs {
            let bytes = blob.to_bytes();
            let path = blob_dir.join(format!("{name}.{}", blob.dtype()));
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            infos.insert(
                name.clone(),
                BlobInfo {
                    dtype: blob.dtype().to_string(),
                    len: blob.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                },
            );
        }
        let manifest = Manifest {
            version: CONTAINER_VERSION,
            kind: self.kind.clone(),
            byte_order: "little".into(),
            meta: self.meta.clone(),
            blobs: infos,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads and verifies every blob listed in the manifest.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CONTAINER_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: CONTAINER_VERSION,
            });
        }
        if manifest.byte_order != "little" {
            return Err(Error::Data(format!("unsupported byte order {}", manifest.byte_order)));
        }
        let mut blobs = BTreeMap::new();
        for (name, info) in &manifest.blobs {
            let path = dir.join(BLOB_DIR).join(format!("{name}.{}", info.dtype));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let width = dtype_width(&info.dtype).ok_or_else(|| Error::Data(format!("blob `{name}` has unknown dtype {}", info.dtype)))?;
            if (bytes.len() as u64) < 8 + info.len * width as u64 {
                return Err(Error::Truncated(name.clone()));
            }
            if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
                return Err(Error::Checksum(name.clone()));
            }
            let blob = Blob::from_bytes(name, &info.dtype, &bytes)?;
            if blob.len() as u64 != info.len {
                return Err(Error::Truncated(name.clone()));
            }
            blobs.insert(name.clone(), blob);
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            blobs,
        })
    }

    /// Checksums of every blob as recorded by a previous write.
    pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(manifest.blobs.into_iter().map(|(k, v)| (k, v.sha256)).collect())
    }
}
