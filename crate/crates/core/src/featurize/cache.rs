//! Binary feature cache files.
//!
//! Layout, all little-endian: `"SERT"`, version `0x01`, dtype `0x01` (f32),
//! rank byte, `rank` × u32 dims, then the row-major f32 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SERT_MAGIC: &[u8; 4] = b"SERT";
pub const SERT_VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

pub fn encode_sert(tensor: &Tensor<f32>) -> Vec<u8> {
    let rank = tensor.rank();
    assert!(rank <= u8::MAX as usize, "rank too large for SERT");
    let mut out = Vec::with_capacity(7 + 4 * rank + 4 * tensor.len());
    out.extend_from_slice(SERT_MAGIC);
    out.push(SERT_VERSION);
    out.push(DTYPE_F32);
    out.push(rank as u8);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sert(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::format("SERT file", msg);
    if bytes.len() < 7 || &bytes[..4] != SERT_MAGIC {
        return Err(bad("missing SERT magic".into()));
    }
    if bytes[4] != SERT_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(bad(format!(
            "payload has {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_sert(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_sert(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_sert(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sert(&bytes)
}
