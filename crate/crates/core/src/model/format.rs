//! Weight file format.
//!
//! ```text
//! "TLM1"                        4 bytes magic
//! header_len                    u32 little-endian
//! header                        header_len bytes of UTF-8 JSON
//! zero padding                  up to the next 64-byte file offset
//! payload                       tensors in directory order, f32 LE,
//!                               each starting on a 64-byte boundary
//! ```
//!
//! The JSON header is `{"config": ModelConfig, "tensors": [{"name", "shape",
//! "dtype": "f32", "offset", "length"}]}` where `offset` is the byte offset
//! from the start of the payload and `length` the tensor's byte length.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::Model;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TLM1";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let tensors = model.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in &tensors {
        let length = t.data.len() * 4;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            length,
        });
        offset = align_up(offset + length);
    }
    let header = serde_json::to_vec(&Header { config: *model.config(), tensors: entries })
        .expect("header serialises");
    let payload_start = align_up(8 + header.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(payload_start, 0);
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(payload_start + align_up(out.len() - payload_start), 0);
    }
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(8..8 + header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
    header.config.validate().map_err(|e| corrupt(format!("header config: {e}")))?;

    let layout = Model::tensor_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "directory lists {} tensors, config implies {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let payload_start = align_up(8 + header_len);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(corrupt(format!(
                "tensor {:?} {:?} where {name:?} {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(corrupt(format!("{name}: unsupported dtype {:?}", entry.dtype)));
        }
        let expected = shape.iter().product::<usize>() * 4;
        if entry.length != expected {
            return Err(corrupt(format!("{name}: byte length {} but shape needs {expected}", entry.length)));
        }
        if entry.offset % ALIGN != 0 {
            return Err(corrupt(format!("{name}: offset {} not 64-byte aligned", entry.offset)));
        }
        let raw = entry
            .offset
            .checked_add(entry.length)
            .and_then(|end| payload.get(entry.offset..end))
            .ok_or_else(|| corrupt(format!("{name}: tensor data truncated")))?;
        tensors.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    Model::from_tensors(header.config, tensors).map_err(|e| corrupt(e.to_string()))
}
