//! Checkpoint container shared by every model in the pipeline: a JSON header
//! (version, dtype, tensor names and shapes) followed by raw little-endian
//! f64 data. The header length is a little-endian u64 prefix.

use crate::error::{CndError, Result};
use crate::nn::Module;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: usize,
}

pub fn save_module(path: &Path, module: &dyn Module) -> Result<()> {
    let params = module.named_params();
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, p) in &params {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, p) in &params {
        for &v in p.value.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_module(path: &Path, module: &mut dyn Module) -> Result<()> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| CndError::State(format!("cannot open checkpoint {path:?}: {e}")))?,
    );
    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf)
        .map_err(|_| CndError::Format("checkpoint truncated before header".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| CndError::Format("checkpoint truncated inside header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CndError::Format(format!("malformed checkpoint header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CndError::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.dtype != "f64" {
        return Err(CndError::Format(format!(
            "unsupported checkpoint dtype {}",
            header.dtype
        )));
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(CndError::Format("checkpoint data not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = module.named_params_mut();
    if params.len() != header.tensors.len() {
        return Err(CndError::State(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter_mut() {
        let entry = header
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CndError::State(format!("checkpoint missing tensor {name}")))?;
        if entry.shape != p.value.shape() {
            return Err(CndError::State(format!(
                "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        if entry.offset + n > values.len() {
            return Err(CndError::Format(format!(
                "checkpoint data too short for tensor {name}"
            )));
        }
        p.value
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&values[entry.offset..entry.offset + n]);
    }
    Ok(())
}

/// FNV-1a hash of a file's bytes; used to verify frozen weights stayed fixed.
pub fn content_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}
