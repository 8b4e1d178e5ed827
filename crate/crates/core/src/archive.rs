//! Self-describing tensor archives.
//!
//! One container format serves synthetic pools, dataset caches, activation
//! dumps, and model checkpoints: a magic tag, a JSON header describing the
//! named entries plus free-form metadata, then raw little-endian data. Writes
//! are deterministic byte-for-byte for identical inputs (the JSON map is
//! sorted), which is what the replay tests hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRAR";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
enum Dtype {
    F64,
    U8,
    I64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    metadata: serde_json::Value,
    entries: Vec<Entry>,
}

/// Builder that accumulates named tensors and writes them to disk.
pub struct ArchiveWriter {
    metadata: serde_json::Value,
    entries: Vec<Entry>,
    data: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new(metadata: serde_json::Value) -> Self {
        ArchiveWriter {
            metadata,
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push_entry(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        let offset = self.data.len() as u64;
        let byte_len = bytes.len() as u64;
        self.data.extend_from_slice(&bytes);
        self.entries.push(Entry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset,
            byte_len,
        });
    }

    pub fn put_f64(&mut self, name: &str, array: &ArrayD<f64>) {
        let contiguous = array.as_standard_layout();
        let mut bytes = Vec::with_capacity(contiguous.len() * 8);
        for &v in contiguous.iter() {
            bytes.write_f64::<LittleEndian>(v).expect("vec write");
        }
        self.push_entry(name, Dtype::F64, array.shape(), bytes);
    }

    pub fn put_u8(&mut self, name: &str, array: &ArrayD<u8>) {
        let contiguous = array.as_standard_layout();
        let bytes: Vec<u8> = contiguous.iter().copied().collect();
        self.push_entry(name, Dtype::U8, array.shape(), bytes);
    }

    pub fn put_i64(&mut self, name: &str, array: &ArrayD<i64>) {
        let contiguous = array.as_standard_layout();
        let mut bytes = Vec::with_capacity(contiguous.len() * 8);
        for &v in contiguous.iter() {
            bytes.write_i64::<LittleEndian>(v).expect("vec write");
        }
        self.push_entry(name, Dtype::I64, array.shape(), bytes);
    }

    /// Serialize to an in-memory byte buffer.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            metadata: self.metadata.clone(),
            entries: self.entries.clone(),
        };
        // Route through BTreeMap-backed Value so key order is canonical.
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Generation(format!("archive header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header_json.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
        out.write_u64::<LittleEndian>(header_json.len() as u64)?;
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }
}

/// A fully loaded archive. Desk-scale artifacts fit in memory.
pub struct Archive {
    path: PathBuf,
    header: Header,
    index: BTreeMap<String, usize>,
    data: Vec<u8>,
}

impl Archive {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(bytes, path.to_path_buf())
    }

    pub fn from_bytes(bytes: Vec<u8>, path: PathBuf) -> Result<Self> {
        let bad = |msg: &str| Error::Archive {
            path: path.clone(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let mut cursor = &bytes[4..16];
        let version = cursor.read_u32::<LittleEndian>()?;
        if version != SCHEMA_VERSION {
            return Err(bad(&format!("unsupported schema version {version}")));
        }
        let header_len = cursor.read_u64::<LittleEndian>()? as usize;
        if bytes.len() < 16 + header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| bad(&format!("malformed header: {e}")))?;
        let data = bytes[16 + header_len..].to_vec();
        let mut index = BTreeMap::new();
        for (i, e) in header.entries.iter().enumerate() {
            let end = e.offset + e.byte_len;
            if end as usize > data.len() {
                return Err(bad(&format!("entry {} exceeds data segment", e.name)));
            }
            index.insert(e.name.clone(), i);
        }
        Ok(Archive {
            path,
            header,
            index,
            data,
        })
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.header.metadata
    }

    pub fn schema_version(&self) -> u32 {
        self.header.schema_version
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.index
            .get(name)
            .map(|&i| &self.header.entries[i])
            .ok_or_else(|| Error::Archive {
                path: self.path.clone(),
                msg: format!("missing entry {name}"),
            })
    }

    fn raw(&self, e: &Entry) -> &[u8] {
        &self.data[e.offset as usize..(e.offset + e.byte_len) as usize]
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::F64 {
            return Err(self.type_err(name, "f64"));
        }
        let mut raw = self.raw(e);
        let n: usize = e.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(raw.read_f64::<LittleEndian>()?);
        }
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|err| Error::Archive {
            path: self.path.clone(),
            msg: format!("entry {name}: {err}"),
        })
    }

    pub fn get_u8(&self, name: &str) -> Result<ArrayD<u8>> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::U8 {
            return Err(self.type_err(name, "u8"));
        }
        ArrayD::from_shape_vec(IxDyn(&e.shape), self.raw(e).to_vec()).map_err(|err| {
            Error::Archive {
                path: self.path.clone(),
                msg: format!("entry {name}: {err}"),
            }
        })
    }

    pub fn get_i64(&self, name: &str) -> Result<ArrayD<i64>> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::I64 {
            return Err(self.type_err(name, "i64"));
        }
        let mut raw = self.raw(e);
        let n: usize = e.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(raw.read_i64::<LittleEndian>()?);
        }
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|err| Error::Archive {
            path: self.path.clone(),
            msg: format!("entry {name}: {err}"),
        })
    }

    fn type_err(&self, name: &str, want: &str) -> Error {
        Error::Archive {
            path: self.path.clone(),
            msg: format!("entry {name} is not {want}"),
        }
    }
}

/// Hex SHA-256 of a byte slice; used for checkpoint ids and replay checks.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_tensors_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dra");

        let mut w = ArchiveWriter::new(serde_json::json!({"kind": "test", "n": 3}));
        let f = array![[1.0_f64, 2.0], [3.0, -4.5]].into_dyn();
        let u = array![[0_u8, 255], [7, 8]].into_dyn();
        let l = array![1_i64, -9].into_dyn();
        w.put_f64("feat", &f);
        w.put_u8("img", &u);
        w.put_i64("labels", &l);
        w.write_to(&path).unwrap();

        let a = Archive::open(&path).unwrap();
        assert_eq!(a.metadata()["kind"], "test");
        assert_eq!(a.get_f64("feat").unwrap(), f);
        assert_eq!(a.get_u8("img").unwrap(), u);
        assert_eq!(a.get_i64("labels").unwrap(), l);
        assert!(a.contains("feat"));
        assert!(!a.contains("nope"));
    }

    #[test]
    fn identical_inputs_give_identical_bytes() {
        let build = || {
            let mut w = ArchiveWriter::new(serde_json::json!({"b": 2, "a": 1}));
            w.put_f64("x", &array![0.25_f64, 0.5].into_dyn());
            w.to_bytes().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn wrong_dtype_and_missing_entry_error() {
        let mut w = ArchiveWriter::new(serde_json::Value::Null);
        w.put_f64("x", &array![1.0_f64].into_dyn());
        let bytes = w.to_bytes().unwrap();
        let a = Archive::from_bytes(bytes, PathBuf::from("mem")).unwrap();
        assert!(a.get_u8("x").is_err());
        assert!(a.get_f64("y").is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let err = Archive::from_bytes(b"NOPE0000000000000000".to_vec(), PathBuf::from("mem"));
        assert!(err.is_err());
    }
}
