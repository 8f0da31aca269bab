//! The "LOGO" binary tensor container.
//!
//! One format serves datasets, world-model checkpoints, and policy
//! checkpoints; a 4-byte section tag says which. Layout, all integers
//! little-endian:
//!
//! ```text
//! magic "LOGO" | version u32 | section tag [4 bytes] | tensor count u32
//! per tensor: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank
//!             | payload f32 × product(dims)
//! ```
//!
//! Round-trips are bit-exact: load(save(x)) reproduces the bytes.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::Array;

pub const MAGIC: [u8; 4] = *b"LOGO";
pub const VERSION: u32 = 1;

/// Section tags for the three file kinds.
pub const TAG_DATA: [u8; 4] = *b"DATA";
pub const TAG_WORLD: [u8; 4] = *b"WMDL";
pub const TAG_POLICY: [u8; 4] = *b"PLCY";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad format: magic bytes are not \"LOGO\"")]
    BadMagic,
    #[error("version mismatch: file is v{found}, reader supports v{VERSION}")]
    BadVersion { found: u32 },
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("wrong section: expected {expected:?}, found {found:?}")]
    WrongSection { expected: String, found: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has unexpected dims {dims:?}")]
    BadDims { name: String, dims: Vec<usize> },
    #[error("byte-encoded value {0} is not a byte")]
    BadEncoding(f32),
}

/// Encodes raw bytes one per f32 (0..=255 are exact in f32), letting non-f32
/// metadata such as hashes and f64 fields ride in the container unchanged.
pub fn bytes_as_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32).collect()
}

/// Inverse of [`bytes_as_f32s`].
pub fn f32s_as_bytes(vals: &[f32]) -> Result<Vec<u8>, IoError> {
    vals.iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(IoError::BadEncoding(v))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub tag: [u8; 4],
    pub entries: Vec<TensorEntry>,
}

impl TensorFile {
    pub fn new(tag: [u8; 4]) -> Self {
        TensorFile { tag, entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f32>) {
        let n: usize = dims.iter().product();
        assert_eq!(n, data.len(), "tensor `{name}`: dims {dims:?} vs {} values", data.len());
        self.entries.push(TensorEntry { name: name.to_string(), dims: dims.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry, IoError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| IoError::MissingTensor(name.to_string()))
    }

    /// Scalar convenience accessor for metadata entries.
    pub fn get_scalar(&self, name: &str) -> Result<f32, IoError> {
        let e = self.get(name)?;
        if e.data.len() != 1 {
            return Err(IoError::BadDims { name: name.into(), dims: e.dims.clone() });
        }
        Ok(e.data[0])
    }

    pub fn expect_tag(&self, tag: [u8; 4]) -> Result<(), IoError> {
        if self.tag != tag {
            return Err(IoError::WrongSection {
                expected: String::from_utf8_lossy(&tag).into_owned(),
                found: String::from_utf8_lossy(&self.tag).into_owned(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| 12 + e.name.len() + 4 * e.dims.len() + 4 * e.data.len()).sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(IoError::BadMagic);
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(IoError::BadVersion { found: version });
        }
        let tag_bytes = cur.take(4, "section tag")?;
        let tag = [tag_bytes[0], tag_bytes[1], tag_bytes[2], tag_bytes[3]];
        let count = cur.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32("name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| IoError::BadName)?
                .to_string();
            let rank = cur.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32("dim")? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(4 * n, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(TensorFile { tag, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Appends a parameter store's arrays (f64 truncated to f32, name order
/// fixed by the store's sorted map) under a name prefix.
pub fn push_params(file: &mut TensorFile, prefix: &str, store: &ParamStore) {
    for (name, arr) in store.bindings() {
        file.push(&format!("{prefix}{name}"), arr.shape(), arr.to_f32());
    }
}

/// Reads back every tensor under `prefix` into a store, stripping the prefix.
pub fn read_params(file: &TensorFile, prefix: &str) -> Result<ParamStore, IoError> {
    let mut store = ParamStore::new();
    for e in &file.entries {
        if let Some(name) = e.name.strip_prefix(prefix) {
            let arr = Array::from_f32(&e.dims, &e.data)
                .map_err(|_| IoError::BadDims { name: e.name.clone(), dims: e.dims.clone() })?;
            store.insert(name, arr);
        }
    }
    Ok(store)
}
