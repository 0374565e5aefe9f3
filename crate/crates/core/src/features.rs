//! Feature files: `u32 T`, `u32 d_input` (little-endian), then `T × d_input` f32 values row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn encode_features(x: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * x.numel());
    out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    for &v in x.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Features(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::Features(format!(
            "header says {t}×{d} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    if t == 0 || d == 0 {
        return Err(Error::Features(format!("empty feature matrix {t}×{d}")));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(&[t, d], data).map_err(|e| Error::Features(e.to_string()))
}

pub fn write_features(x: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(x))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&std::fs::read(path)?)
}
