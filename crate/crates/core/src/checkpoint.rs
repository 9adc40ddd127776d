//! Self-describing parameter container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header
//! (version, free-form model metadata, tensor table, payload SHA-256), then
//! the `f64` little-endian payload in tensor-table order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{device, ParamStore};

const MAGIC: &[u8; 8] = b"CABNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in store.vars() {
            let data = var.flatten_all()?.to_vec1::<f64>()?;
            tensors.insert(name.clone(), (var.dims().to_vec(), data));
        }
        Ok(Self { meta, tensors })
    }

    /// Copies every tensor into `store`; names and shapes must match exactly.
    pub fn apply_to(&self, store: &ParamStore) -> Result<()> {
        let want: Vec<&String> = store.vars().keys().collect();
        let have: Vec<&String> = self.tensors.keys().collect();
        if want != have {
            let missing: Vec<_> = want.iter().filter(|n| !self.tensors.contains_key(**n)).take(3).collect();
            let extra: Vec<_> = have.iter().filter(|n| store.get(n).is_none()).take(3).collect();
            return Err(Error::ConfigMismatch(format!(
                "parameter sets differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, (shape, data)) in &self.tensors {
            let var = store.get(name).expect("checked above");
            if var.dims() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!("{name}: shape {shape:?} vs model {:?}", var.dims())));
            }
            var.set(&Tensor::from_vec(data.clone(), shape.as_slice(), &device())?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset: payload.len() / 8,
                len: data.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut bytes = Vec::with_capacity(12 + header.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end =
            12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|_| corrupt("unreadable header"))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint schema version {} (this build reads {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[header_end..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload hash mismatch"));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, end) = (e.offset * 8, (e.offset + e.len) * 8);
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(corrupt(&format!("tensor `{}` out of bounds", e.name)));
            }
            let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

/// Writes to a sibling temp file then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp =
        dir.join(format!(".{}.tmp", path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
