//! Self-describing binary container for datasets, reconstructions and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PVAE" | version: u32 = 1 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The header holds caller metadata and an array directory; each entry gives
//! `name`, `dtype`, `shape`, and the `byte_offset` / `byte_length` of the array
//! relative to the start of the payload. Complex arrays (`c64`) are
//! interleaved `(re, im)` `f32` pairs.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PVAE";
pub const VERSION: u32 = 1;
const PREAMBLE: u64 = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("format error: bad magic bytes (not a PVAE container)")]
    BadMagic,
    #[error("format error: unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("format error: header truncated")]
    TruncatedHeader,
    #[error("format error: header is not valid: {0}")]
    BadHeader(String),
    #[error("format error: array {name:?} truncated (needs bytes up to {needed}, payload has {available})")]
    Truncated { name: String, needed: u64, available: u64 },
    #[error("format error: arrays {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("format error: array {name:?}: {reason}")]
    BadArray { name: String, reason: String },
    #[error("array {0:?} not found")]
    Missing(String),
    #[error("duplicate array name {0:?}")]
    Duplicate(String),
    #[error("container i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDtype {
    U8,
    U32,
    U64,
    F32,
    F64,
    C64,
}

impl ArrayDtype {
    pub fn size(self) -> u64 {
        match self {
            ArrayDtype::U8 => 1,
            ArrayDtype::U32 | ArrayDtype::F32 => 4,
            ArrayDtype::U64 | ArrayDtype::F64 | ArrayDtype::C64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex32>),
}

impl ArrayData {
    pub fn dtype(&self) -> ArrayDtype {
        match self {
            ArrayData::U8(_) => ArrayDtype::U8,
            ArrayData::U32(_) => ArrayDtype::U32,
            ArrayData::U64(_) => ArrayDtype::U64,
            ArrayData::F32(_) => ArrayDtype::F32,
            ArrayData::F64(_) => ArrayDtype::F64,
            ArrayData::C64(_) => ArrayDtype::C64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::C64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::U8(v) => v.clone(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::C64(v) => v
                .iter()
                .flat_map(|z| z.re.to_le_bytes().into_iter().chain(z.im.to_le_bytes()))
                .collect(),
        }
    }

    fn from_le_bytes(dtype: ArrayDtype, b: &[u8]) -> Self {
        fn chunks<const K: usize>(b: &[u8]) -> impl Iterator<Item = [u8; K]> + '_ {
            b.chunks_exact(K).map(|c| c.try_into().unwrap())
        }
        match dtype {
            ArrayDtype::U8 => ArrayData::U8(b.to_vec()),
            ArrayDtype::U32 => ArrayData::U32(chunks::<4>(b).map(u32::from_le_bytes).collect()),
            ArrayDtype::U64 => ArrayData::U64(chunks::<8>(b).map(u64::from_le_bytes).collect()),
            ArrayDtype::F32 => ArrayData::F32(chunks::<4>(b).map(f32::from_le_bytes).collect()),
            ArrayDtype::F64 => ArrayData::F64(chunks::<8>(b).map(f64::from_le_bytes).collect()),
            ArrayDtype::C64 => ArrayData::C64(
                chunks::<8>(b)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: ArrayDtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// Caller-defined description (configuration, provenance, hyperparameters).
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a container and syncs it to disk before returning.
pub fn write_container(path: &Path, meta: serde_json::Value, arrays: &[Array]) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (i, a) in arrays.iter().enumerate() {
        if arrays[..i].iter().any(|b| b.name == a.name) {
            return Err(ContainerError::Duplicate(a.name.clone()));
        }
        let n: usize = a.shape.iter().product();
        if n != a.data.len() {
            return Err(ContainerError::BadArray {
                name: a.name.clone(),
                reason: format!("shape {:?} needs {n} values, data has {}", a.shape, a.data.len()),
            });
        }
        let len = n as u64 * a.data.dtype().size();
        entries.push(ArrayEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            byte_offset: offset,
            byte_length: len,
        });
        offset += len;
    }
    let header = Header {
        format_version: VERSION,
        meta,
        arrays: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(io_err(path));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(json.len() as u64).to_le_bytes())?;
    put(&json)?;
    for a in arrays {
        put(&a.data.to_le_bytes())?;
    }
    let file = w.into_inner().map_err(|e| io_err(path)(e.into_error()))?;
    file.sync_all().map_err(io_err(path))?;
    Ok(())
}

/// An opened container. The header is parsed and every directory entry
/// checked on open; array payloads are read only when requested.
#[derive(Debug, Clone)]
pub struct Container {
    path: PathBuf,
    header: Header,
    payload_start: u64,
}

impl Container {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path).map_err(io_err(path))?;
        let file_len = f.metadata().map_err(io_err(path))?.len();
        let mut pre = [0u8; PREAMBLE as usize];
        let got = read_up_to(&mut f, &mut pre).map_err(io_err(path))?;
        if got < 4 || &pre[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if got < PREAMBLE as usize {
            return Err(ContainerError::TruncatedHeader);
        }
        let version = u32::from_le_bytes(pre[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(pre[8..16].try_into().unwrap());
        if PREAMBLE.checked_add(header_len).is_none_or(|end| end > file_len) {
            return Err(ContainerError::TruncatedHeader);
        }
        let mut json = vec![0u8; header_len as usize];
        f.read_exact(&mut json).map_err(io_err(path))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
        if header.format_version != VERSION {
            return Err(ContainerError::UnsupportedVersion(header.format_version));
        }
        let payload_start = PREAMBLE + header_len;
        validate_directory(&header.arrays, file_len - payload_start)?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            payload_start,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    pub fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.header.arrays.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.arrays.iter().map(|e| e.name.as_str())
    }

    pub fn read(&self, name: &str) -> Result<Array> {
        let e = self.entry(name).ok_or_else(|| ContainerError::Missing(name.to_string()))?;
        let mut f = File::open(&self.path).map_err(io_err(&self.path))?;
        f.seek(SeekFrom::Start(self.payload_start + e.byte_offset))
            .map_err(io_err(&self.path))?;
        let mut buf = vec![0u8; e.byte_length as usize];
        f.read_exact(&mut buf).map_err(io_err(&self.path))?;
        Ok(Array {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: ArrayData::from_le_bytes(e.dtype, &buf),
        })
    }

    pub fn read_all(&self) -> Result<Vec<Array>> {
        self.header.arrays.iter().map(|e| self.read(&e.name)).collect()
    }
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

fn validate_directory(entries: &[ArrayEntry], payload_len: u64) -> Result<()> {
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|b| b.name == e.name) {
            return Err(ContainerError::Duplicate(e.name.clone()));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(e.dtype.size()));
        if n != Some(e.byte_length) {
            return Err(ContainerError::BadArray {
                name: e.name.clone(),
                reason: format!("byte_length {} does not match shape {:?}", e.byte_length, e.shape),
            });
        }
        let end = e.byte_offset.checked_add(e.byte_length);
        if end.is_none_or(|end| end > payload_len) {
            return Err(ContainerError::Truncated {
                name: e.name.clone(),
                needed: end.unwrap_or(u64::MAX),
                available: payload_len,
            });
        }
    }
    let mut sorted: Vec<&ArrayEntry> = entries.iter().filter(|e| e.byte_length > 0).collect();
    sorted.sort_by_key(|e| e.byte_offset);
    for w in sorted.windows(2) {
        if w[0].byte_offset + w[0].byte_length > w[1].byte_offset {
            return Err(ContainerError::Overlap(w[0].name.clone(), w[1].name.clone()));
        }
    }
    Ok(())
}
