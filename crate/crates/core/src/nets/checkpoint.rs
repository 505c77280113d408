//! Versioned container for named float arrays plus a JSON metadata blob.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! the arrays as little-endian f32 in header order. The header lists each
//! array's name, shape, byte offset, byte length and SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, Reader};

const MAGIC: &[u8; 8] = b"DYNADCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Layer {
                    layer: a.name.clone(),
                    msg: format!("shape {:?} does not match {} values", a.shape, a.data.len()),
                });
            }
            let start = payload.len();
            io::push_f32s(&mut payload, &a.data);
            entries.push(Entry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset: start as u64,
                len: (payload.len() - start) as u64,
                sha256: digest_hex(&payload[start..]),
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let payload = r.take(r.remaining())?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let (start, len) = (e.offset as usize, e.len as usize);
            if start + len > payload.len() {
                return Err(Error::MissingArray { name: e.name });
            }
            let raw = &payload[start..start + len];
            if digest_hex(raw) != e.sha256 {
                return Err(Error::Layer { layer: e.name, msg: "checksum mismatch".into() });
            }
            if e.shape.iter().product::<usize>() * 4 != len {
                return Err(Error::Layer {
                    layer: e.name,
                    msg: format!("declared shape {:?} does not match {len} bytes", e.shape),
                });
            }
            arrays.push(NamedArray { name: e.name, shape: e.shape, data: io::bytes_to_f32s(raw) });
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?).map_err(|e| match e {
            Error::Format(msg) => Error::Checkpoint { path: path.to_path_buf(), msg },
            other => other,
        })
    }

    /// Loads and checks the kind tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected a {kind} checkpoint, found {}", c.kind),
            });
        }
        Ok(c)
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("metadata `{key}`: {e}")))
    }
}
