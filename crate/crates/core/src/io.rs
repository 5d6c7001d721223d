//! On-disk tensor store: a text manifest next to a raw little-endian f32 blob.
//!
//! The manifest lists every tensor with its shape, byte range, and content
//! hash, plus free-form metadata lines. Both files are written to temporary
//! names and renamed into place, manifest last, so a reader never observes a
//! manifest pointing at a half-written blob. Loading verifies every hash.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported store version: {0}")]
    Version(String),
    #[error("tensor {name}: stored hash does not match blob contents")]
    HashMismatch { name: String },
    #[error("tensor {name}: byte range {offset}..{end} exceeds blob of {blob_len} bytes")]
    RangeOutOfBounds {
        name: String,
        offset: usize,
        end: usize,
        blob_len: usize,
    },
    #[error("tensor {name}: shape {shape:?} wants {expected} values, blob slice holds {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("missing metadata key: {0}")]
    MissingMeta(String),
}

const MAGIC: &str = "patchpure-tensors v1";

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of named f32 tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        assert!(
            !key.contains(char::is_whitespace),
            "meta keys must be whitespace-free"
        );
        assert!(!value.contains('\n'), "meta values must be single-line");
        self.meta.insert(key, value);
    }

    pub fn meta(&self, key: &str) -> Result<&str, StoreError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| StoreError::MissingMeta(key.to_string()))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace),
            "tensor names must be whitespace-free"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        self.tensors.push(TensorEntry { name, shape, data });
    }

    pub fn tensors(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry, StoreError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| StoreError::MissingTensor(name.to_string()))
    }

    /// Writes `<path>` (manifest) and `<path>.bin` (blob) atomically.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let blob_path = blob_path_for(path);
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = String::new();
        writeln!(manifest, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(manifest, "meta {k} {v}").unwrap();
        }
        for t in &self.tensors {
            let offset = blob.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let byte_len = blob.len() - offset;
            let hash = sha256_hex(&blob[offset..]);
            let shape = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let shape = if shape.is_empty() { "-".to_string() } else { shape };
            writeln!(
                manifest,
                "tensor {} f32 {} {} {} {}",
                t.name, shape, offset, byte_len, hash
            )
            .unwrap();
        }
        write_atomic(&blob_path, &blob)?;
        write_atomic(path, manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let manifest = fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let blob_path = blob_path_for(path);
        let blob = fs::read(&blob_path).map_err(|source| StoreError::Io {
            path: blob_path.clone(),
            source,
        })?;
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first == MAGIC => {}
            Some((_, first)) => return Err(StoreError::Version(first.to_string())),
            None => return Err(StoreError::Version("<empty file>".to_string())),
        }
        let mut store = TensorStore::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| StoreError::Format {
                        line: line_no,
                        reason: "meta needs key and value".to_string(),
                    })?;
                    store.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 6 {
                        return Err(StoreError::Format {
                            line: line_no,
                            reason: format!("expected 6 tensor fields, got {}", fields.len()),
                        });
                    }
                    let name = fields[0].to_string();
                    if fields[1] != "f32" {
                        return Err(StoreError::Format {
                            line: line_no,
                            reason: format!("unsupported dtype {}", fields[1]),
                        });
                    }
                    let shape: Vec<usize> = if fields[2] == "-" {
                        Vec::new()
                    } else {
                        fields[2]
                            .split(',')
                            .map(|d| {
                                d.parse::<usize>().map_err(|_| StoreError::Format {
                                    line: line_no,
                                    reason: format!("bad shape component {d}"),
                                })
                            })
                            .collect::<Result<_, _>>()?
                    };
                    let parse_usize = |s: &str| {
                        s.parse::<usize>().map_err(|_| StoreError::Format {
                            line: line_no,
                            reason: format!("bad integer {s}"),
                        })
                    };
                    let offset = parse_usize(fields[3])?;
                    let byte_len = parse_usize(fields[4])?;
                    let hash = fields[5];
                    let end = offset + byte_len;
                    if end > blob.len() {
                        return Err(StoreError::RangeOutOfBounds {
                            name,
                            offset,
                            end,
                            blob_len: blob.len(),
                        });
                    }
                    let slice = &blob[offset..end];
                    if sha256_hex(slice) != hash {
                        return Err(StoreError::HashMismatch { name });
                    }
                    let expected: usize = shape.iter().product();
                    if byte_len % 4 != 0 || byte_len / 4 != expected {
                        return Err(StoreError::ShapeMismatch {
                            name,
                            shape,
                            expected,
                            actual: byte_len / 4,
                        });
                    }
                    let data: Vec<f32> = slice
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    store.tensors.push(TensorEntry { name, shape, data });
                }
                other => {
                    return Err(StoreError::Format {
                        line: line_no,
                        reason: format!("unknown record kind {other}"),
                    });
                }
            }
        }
        Ok(store)
    }
}

fn blob_path_for(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_os_string();
    os.push(".bin");
    PathBuf::from(os)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}
