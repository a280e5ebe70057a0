//! On-disk tensor archive: a JSON manifest plus raw little-endian `f32`
//! blobs.
//!
//! An archive directory contains `manifest.json` describing every tensor
//! (name, shape, dtype, byte offset, which blob file it lives in), a string
//! metadata map, and optionally a CRC-32 per blob. The writer always produces
//! a single blob, `weights-0.bin`, with tensors packed in name order, and
//! always records checksums; the reader accepts any blob layout that passes
//! validation and verifies whatever checksums are present.
//!
//! Reading is strict: unsupported manifest versions, duplicate names,
//! unknown dtypes, out-of-range byte ranges, checksum mismatches, and
//! non-finite payloads are all hard errors. The goal is that a corrupt or
//! truncated archive can never be silently half-loaded.
//!
//! Payloads are stored in `f32` and widened to `f64` when converted to
//! matrices; writing back what was read reproduces the payload bytes
//! exactly, since `f32 -> f64 -> f32` round-trips every finite value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::mat::Mat;

/// Manifest schema version this code reads and writes.
pub const MANIFEST_VERSION: u64 = 1;
/// File name of the manifest inside an archive directory.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Blob file name produced by the writer.
pub const DEFAULT_BLOB_FILE: &str = "weights-0.bin";

const DTYPE_F32: &str = "f32";

// ---------------------------------------------------------------------------
// CRC-32
// ---------------------------------------------------------------------------

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut n = 0;
    while n < 256 {
        let mut c = n as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            bit += 1;
        }
        table[n] = c;
        n += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_crc_table();

/// CRC-32 (IEEE 802.3, reflected polynomial `0xEDB88320`) of a byte slice.
/// `crc32(b"123456789") == 0xCBF43926`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    manifest_version: u64,
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crc32: Option<BTreeMap<String, u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    blob_file: String,
}

// ---------------------------------------------------------------------------
// In-memory archive
// ---------------------------------------------------------------------------

/// A single stored tensor: its shape and the raw `f32` payload, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// Dimensions, outermost first. Matrices use `[rows, cols]`.
    pub shape: Vec<usize>,
    /// Row-major payload; `data.len()` equals the product of `shape`.
    pub data: Vec<f32>,
}

/// A set of named tensors plus free-form string metadata, held in name
/// order so that serialization is deterministic.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
    /// Free-form key/value annotations carried alongside the tensors.
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    /// An archive with no tensors and no metadata.
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tensors stored.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    /// True when no tensors are stored.
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Looks a tensor up by name.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Adds a tensor, validating shape/payload agreement and finiteness.
    ///
    /// # Errors
    ///
    /// Empty name, duplicate name, `shape` product not matching `data.len()`
    /// (or overflowing), or any NaN/infinity in the payload.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<(), CoreError> {
        if name.is_empty() {
            return Err(CoreError::BadTensor {
                name: String::from("<empty>"),
                reason: String::from("tensor name must not be empty"),
            });
        }
        if self.tensors.contains_key(name) {
            return Err(CoreError::DuplicateName { name: name.to_string() });
        }
        let count = checked_element_count(name, &shape)?;
        if count != data.len() {
            return Err(CoreError::BadTensor {
                name: name.to_string(),
                reason: format!("shape {shape:?} implies {count} elements but payload has {}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { name: name.to_string(), index });
        }
        self.tensors.insert(name.to_string(), Tensor { shape, data });
        Ok(())
    }

    /// Adds a matrix as a 2-D tensor, narrowing its entries to `f32`.
    ///
    /// # Errors
    ///
    /// As [`TensorArchive::insert`]; additionally, values whose magnitude
    /// overflows `f32` are rejected rather than stored as infinity.
    pub fn insert_mat(&mut self, name: &str, m: &Mat) -> Result<(), CoreError> {
        let data: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
        if let Some(index) = m
            .data()
            .iter()
            .zip(&data)
            .position(|(&wide, narrow)| wide.is_finite() && !narrow.is_finite())
        {
            return Err(CoreError::BadTensor {
                name: name.to_string(),
                reason: format!("value {} at flat index {index} overflows f32", m.data()[index]),
            });
        }
        self.insert(name, vec![m.rows(), m.cols()], data)
    }

    /// Fetches a tensor by name and widens it to a matrix.
    ///
    /// # Errors
    ///
    /// The tensor is absent, or its shape is not 2-D.
    pub fn mat(&self, name: &str) -> Result<Mat, CoreError> {
        let tensor = self
            .tensors
            .get(name)
            .ok_or_else(|| CoreError::MissingTensor { name: name.to_string() })?;
        match tensor.shape[..] {
            [rows, cols] => {
                let data: Vec<f64> = tensor.data.iter().map(|&v| f64::from(v)).collect();
                Ok(Mat::from_flat(rows, cols, data))
            }
            _ => Err(CoreError::ShapeMismatch {
                name: name.to_string(),
                expected: String::from("2-D [rows, cols]"),
                found: format!("{:?}", tensor.shape),
            }),
        }
    }

    /// Writes the archive into `dir` as `manifest.json` plus a single blob
    /// `weights-0.bin`, tensors packed back to back in name order, with a
    /// CRC-32 recorded for the blob. Creates `dir` if needed; overwrites
    /// existing files.
    ///
    /// # Errors
    ///
    /// Filesystem failures only — the in-memory archive is valid by
    /// construction.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

        let mut blob: Vec<u8> = Vec::new();
        let mut records: Vec<TensorRecord> = Vec::with_capacity(self.tensors.len());
        for (name, tensor) in &self.tensors {
            let byte_offset = blob.len() as u64;
            for &v in &tensor.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            records.push(TensorRecord {
                name: name.clone(),
                shape: tensor.shape.clone(),
                dtype: DTYPE_F32.to_string(),
                byte_offset,
                blob_file: DEFAULT_BLOB_FILE.to_string(),
            });
        }

        let mut checksums = BTreeMap::new();
        checksums.insert(DEFAULT_BLOB_FILE.to_string(), crc32(&blob));
        let manifest = ManifestFile {
            manifest_version: MANIFEST_VERSION,
            tensors: records,
            metadata: self.metadata.clone(),
            crc32: Some(checksums),
        };

        let blob_path = dir.join(DEFAULT_BLOB_FILE);
        std::fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)
            .expect("manifest serialization cannot fail");
        text.push('\n');
        std::fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
        Ok(())
    }

    /// Reads and fully validates an archive directory.
    ///
    /// # Errors
    ///
    /// Missing or malformed manifest, unsupported version, duplicate tensor
    /// names, non-`f32` dtypes, blob paths that are not bare file names,
    /// byte ranges that fall outside their blob, CRC mismatches, and
    /// non-finite payload values.
    pub fn read_from_dir(dir: &Path) -> Result<Self, CoreError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| CoreError::ManifestParse { path: manifest_path.clone(), source: e })?;

        if manifest.manifest_version != MANIFEST_VERSION {
            return Err(CoreError::UnsupportedVersion {
                found: manifest.manifest_version,
                expected: MANIFEST_VERSION,
            });
        }

        // Load every referenced blob once, then verify declared checksums.
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for record in &manifest.tensors {
            validate_blob_name(&record.name, &record.blob_file)?;
            if !blobs.contains_key(&record.blob_file) {
                let blob_path = dir.join(&record.blob_file);
                let bytes = std::fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
                blobs.insert(record.blob_file.clone(), bytes);
            }
        }
        if let Some(checksums) = &manifest.crc32 {
            for (blob_name, bytes) in &blobs {
                if let Some(&expected) = checksums.get(blob_name) {
                    let actual = crc32(bytes);
                    if actual != expected {
                        return Err(CoreError::ChecksumMismatch {
                            blob: blob_name.clone(),
                            expected,
                            actual,
                        });
                    }
                }
            }
        }

        let mut archive = TensorArchive { tensors: BTreeMap::new(), metadata: manifest.metadata };
        for record in manifest.tensors {
            if archive.tensors.contains_key(&record.name) {
                return Err(CoreError::DuplicateName { name: record.name });
            }
            if record.dtype != DTYPE_F32 {
                return Err(CoreError::BadTensor {
                    name: record.name,
                    reason: format!("unsupported dtype `{}` (only f32)", record.dtype),
                });
            }
            let count = checked_element_count(&record.name, &record.shape)?;
            let len_bytes = (count as u64)
                .checked_mul(4)
                .ok_or_else(|| CoreError::BadTensor {
                    name: record.name.clone(),
                    reason: String::from("byte length overflows u64"),
                })?;
            let blob = &blobs[&record.blob_file];
            let end = record.byte_offset.checked_add(len_bytes);
            if end.is_none() || end.unwrap() > blob.len() as u64 {
                return Err(CoreError::OffsetOverflow {
                    name: record.name,
                    blob: record.blob_file,
                    offset: record.byte_offset,
                    len: len_bytes,
                    blob_len: blob.len() as u64,
                });
            }
            let start = record.byte_offset as usize;
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let at = start + 4 * i;
                let word: [u8; 4] = blob[at..at + 4].try_into().unwrap();
                data.push(f32::from_le_bytes(word));
            }
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite { name: record.name, index });
            }
            archive.tensors.insert(record.name, Tensor { shape: record.shape, data });
        }
        Ok(archive)
    }
}

fn checked_element_count(name: &str, shape: &[usize]) -> Result<usize, CoreError> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        CoreError::BadTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows element count"),
        }
    })
}

fn validate_blob_name(tensor: &str, blob_file: &str) -> Result<(), CoreError> {
    let bad = blob_file.is_empty()
        || blob_file == "."
        || blob_file == ".."
        || blob_file.contains('/')
        || blob_file.contains('\\');
    if bad {
        return Err(CoreError::BadTensor {
            name: tensor.to_string(),
            reason: format!("blob file `{blob_file}` must be a bare file name"),
        });
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io { path: PathBuf::from(path), source }
}
