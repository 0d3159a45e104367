//! Checkpoint file format: magic "MTPD", format version, JSON header (graph,
//! metadata, tensor index), then all parameters as little-endian fp32.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::ModelGraph;
use super::net::Model;

const MAGIC: &[u8; 4] = b"MTPD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training_step: u64,
    pub seed: u64,
    /// Hash of the pruning plan this model came from, when it did.
    pub plan_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    graph: ModelGraph,
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in fp32 elements within the payload.
    offset: usize,
    len: usize,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in model.params() {
        let values = tensor.value();
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header {
        graph: model.graph.clone(),
        metadata: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointMeta)> {
    let mut file = fs::File::open(path).map_err(|e| {
        Error::Dependency(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let mut header_len = [0u8; 8];
    file.read_exact(&mut header_len)?;
    let header_len = u64::from_le_bytes(header_len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header expects {}",
            payload.len(),
            total * 4
        )));
    }

    let mut params: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for entry in &header.tensors {
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        for i in entry.offset..entry.offset + entry.len {
            let bytes: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().expect("bounds checked");
            data.push(S::of(f64::from(f32::from_le_bytes(bytes))));
        }
        if params
            .insert(entry.name.clone(), Tensor::parameter(&entry.shape, data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor '{}'", entry.name)));
        }
    }
    let model = Model::from_params(header.graph, params)?;
    Ok((model, header.metadata))
}

/// Hex SHA-256 of a file's raw bytes; the provenance identity of artifacts.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dependency(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
