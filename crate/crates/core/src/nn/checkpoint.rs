//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header mapping each array name to its shape, dtype and byte offset, then
//! the raw little-endian `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MACFCKPT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    arrays: BTreeMap<String, Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Named arrays plus free-form metadata, as read from or written to disk.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let arrays = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            arrays,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.arrays {
            arrays.insert(
                name.clone(),
                Entry {
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: payload.len(),
                },
            );
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            arrays,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut arrays = BTreeMap::new();
        for (name, e) in header.arrays {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("`{name}` has unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("payload for `{name}` is truncated")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            arrays,
            metadata: header.metadata,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies arrays into `store`, requiring every parameter to be present
    /// with exactly the configured shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let t = self
                .arrays
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
