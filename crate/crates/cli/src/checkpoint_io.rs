//! Checkpoint files: a single-line JSON header (metadata plus a tensor
//! directory) followed by little-endian f32 payloads in directory order.

use std::fs;
use std::path::Path;

use csvmasr_core::model::Model;
use csvmasr_core::numerics::Tensor;
use csvmasr_core::trainer::{Checkpoint, CheckpointMeta};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the payload section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> CliResult<Vec<u8>> {
    let mut offset = 0;
    let tensors = ckpt
        .params
        .entries()
        .iter()
        .map(|e| {
            let (r, c) = e.value.shape();
            let entry = TensorEntry { name: e.name.clone(), shape: [r, c], offset };
            offset += 4 * r * c;
            entry
        })
        .collect();
    let mut bytes = serde_json::to_vec(&Header { meta: ckpt.meta.clone(), tensors })?;
    bytes.push(b'\n');
    bytes.reserve(offset);
    for e in ckpt.params.entries() {
        for &v in e.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> CliResult<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| CliError::io(path, e))
}

/// Rebuilds the model layout from the stored configuration and fills it
/// with the stored values.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> CliResult<(Model, Checkpoint)> {
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CliError::format(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| CliError::format(path, e.to_string()))?;
    let payload = &bytes[split + 1..];
    let (model, mut params) = Model::init(header.meta.model.clone(), 0)?;
    if header.tensors.len() != params.len() {
        return Err(CliError::format(
            path,
            format!("{} tensors stored, model has {}", header.tensors.len(), params.len()),
        ));
    }
    let mut expected_offset = 0;
    for (id, entry) in params.ids().collect::<Vec<_>>().into_iter().zip(&header.tensors) {
        let mismatch = |reason: String| csvmasr_core::Error::CheckpointMismatch { name: entry.name.clone(), reason };
        let want = params.entry(id);
        if want.name != entry.name {
            return Err(mismatch(format!("expected tensor {} at this position", want.name)).into());
        }
        let [r, c] = entry.shape;
        if want.value.shape() != (r, c) {
            return Err(mismatch(format!("shape {:?} versus {:?}", (r, c), want.value.shape())).into());
        }
        if entry.offset != expected_offset {
            return Err(mismatch(format!("offset {} but {} expected", entry.offset, expected_offset)).into());
        }
        let end = entry.offset + 4 * r * c;
        let raw = payload.get(entry.offset..end).ok_or_else(|| mismatch("payload truncated".into()))?;
        let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
        params.set(id, Tensor::new(r, c, data)?)?;
        expected_offset = end;
    }
    if payload.len() != expected_offset {
        return Err(CliError::format(path, format!("{} trailing payload bytes", payload.len() - expected_offset)));
    }
    Ok((model, Checkpoint { meta: header.meta, params }))
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Model, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
