//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON header,
//! little-endian tensor payload, then a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 8] = b"DSRNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Epochs fully completed.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub train: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Header metadata plus named tensors (parameters under `param/`, Adam moments under
/// `adam.m/` and `adam.v/`).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub epoch: u64,
    pub step: u64,
    pub train: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("cannot checkpoint {other:?} tensors"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Config(format!("cannot checkpoint {other:?} tensors"))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_tag(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = CheckpointHeader {
            model: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            train: self.train.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a checkpoint image. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path, device: &Device) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < PREFIX_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint signature"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint {
                path: origin.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(corrupt("file truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        if PREFIX_LEN + header_len > body.len() {
            return Err(corrupt("header length exceeds file"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[PREFIX_LEN..PREFIX_LEN + header_len])
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let payload = &body[PREFIX_LEN + header_len..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| corrupt(&format!("tensor {} out of bounds", e.name)))?;
            let count: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if raw.len() == count * 4 => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                "f64" if raw.len() == count * 8 => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                _ => return Err(corrupt(&format!("tensor {} has inconsistent size or dtype", e.name))),
            };
            tensors.insert(e.name.clone(), t);
        }
        Ok(Self {
            model: header.model,
            epoch: header.epoch,
            step: header.step,
            train: header.train,
            tensors,
        })
    }
}

/// Writes through a temporary sibling and renames, so readers never see partial files.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Resource(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes, path, &Device::Cpu)
}
