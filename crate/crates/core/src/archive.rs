//! Flat tensor-archive file format (`ATSL1`).
//!
//! Layout: the 5 magic bytes `ATSL1`, an unsigned 64-bit little-endian header
//! length, that many bytes of UTF-8 JSON — an array of
//! `{"name", "shape", "dtype": "f32", "offset"}` entries — and finally one
//! raw blob of little-endian 32-bit floats. `offset` counts bytes from the
//! start of the blob. Values are carried bit-for-bit: the archive makes no
//! finiteness judgment, so round trips preserve every payload exactly.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::atomic_write;

const MAGIC: &[u8; 5] = b"ATSL1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path} is too short ({len} bytes) to be a tensor archive")]
    TooShort { path: PathBuf, len: usize },
    #[error("{path} has bad magic bytes `{found}`, expected `ATSL1`")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path} declares a {declared}-byte header but only {available} bytes follow")]
    HeaderLength {
        path: PathBuf,
        declared: u64,
        available: usize,
    },
    #[error("bad archive header JSON in {path}: {source}")]
    HeaderJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("tensor `{name}` has unsupported dtype `{dtype}`, only f32 is defined")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("duplicate tensor name `{name}`")]
    DuplicateTensor { name: String },
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor `{name}`: shape product overflows")]
    ShapeOverflow { name: String },
    #[error("tensor `{name}`: shape implies {expected} values but {found} were given")]
    ShapeDataMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor `{name}` extends past the end of the data blob")]
    OutOfBounds { name: String },
}

/// One named tensor: a shape and its row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    /// Builds an entry, checking that the shape's element count matches the
    /// data length. An empty shape denotes a single scalar.
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, ArchiveError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        let expected = numel(&shape).ok_or_else(|| ArchiveError::ShapeOverflow {
            name: name.clone(),
        })?;
        if expected != data.len() {
            return Err(ArchiveError::ShapeDataMismatch {
                name,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// Serializes tensors to an archive file (atomically). Header order equals
/// the given order; data is packed contiguously in the same order.
pub fn write_archive(tensors: &[TensorEntry], path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(ArchiveError::DuplicateTensor {
                name: t.name.clone(),
            });
        }
    }

    let mut header = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        header.push(HeaderEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += 4 * t.data.len() as u64;
    }
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");

    let blob_len = offset as usize;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + blob_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for t in tensors {
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes).map_err(|source| ArchiveError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an archive back, validating magic, header, dtypes and blob bounds.
/// Tensors are returned in header order with their exact stored bits.
pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<TensorEntry>, ArchiveError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(ArchiveError::TooShort {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ArchiveError::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..MAGIC.len()]).into_owned(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let rest = &bytes[13..];
    if header_len > rest.len() as u64 {
        return Err(ArchiveError::HeaderLength {
            path: path.to_path_buf(),
            declared: header_len,
            available: rest.len(),
        });
    }
    let (header_bytes, blob) = rest.split_at(header_len as usize);
    let header: Vec<HeaderEntry> =
        serde_json::from_slice(header_bytes).map_err(|source| ArchiveError::HeaderJson {
            path: path.to_path_buf(),
            source,
        })?;

    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(header.len());
    for entry in header {
        if entry.dtype != "f32" {
            return Err(ArchiveError::UnsupportedDtype {
                name: entry.name,
                dtype: entry.dtype,
            });
        }
        if entry.name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        if !seen.insert(entry.name.clone()) {
            return Err(ArchiveError::DuplicateTensor { name: entry.name });
        }
        let count = numel(&entry.shape).ok_or_else(|| ArchiveError::ShapeOverflow {
            name: entry.name.clone(),
        })?;
        let byte_len = count
            .checked_mul(4)
            .ok_or_else(|| ArchiveError::ShapeOverflow {
                name: entry.name.clone(),
            })?;
        if entry.offset > usize::MAX as u64 {
            return Err(ArchiveError::OutOfBounds { name: entry.name });
        }
        let start = entry.offset as usize;
        match start.checked_add(byte_len) {
            Some(end) if end <= blob.len() => {}
            _ => return Err(ArchiveError::OutOfBounds { name: entry.name }),
        }
        let data: Vec<f32> = blob[start..start + byte_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(TensorEntry {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    Ok(tensors)
}
