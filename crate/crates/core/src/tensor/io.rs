//! Flat binary tensor format:
//!
//! ```text
//! "SPT1" | u32 rank | rank x u32 extents | f64 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPT1";

pub fn write_binary(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 8 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for extent in tensor.shape() {
        out.extend_from_slice(&(*extent as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_binary(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format(format!("tensor binary: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing SPT1 magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(4)? as usize;
    let shape = (0..rank)
        .map(|i| u32_at(8 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 8 * count {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * count
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if rank == 0 {
        let data: Vec<f64> = data;
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(&shape, data)
}

pub fn write_binary_file(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, write_binary(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_binary_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_binary(&bytes)
}
