//! Binary feature files.
//!
//! Layout: 8-byte magic `FEATB1\0\0`, rows and cols as little-endian `u32`,
//! then `rows * cols` little-endian `f32` values in row-major order.
//! Values are promoted to `f64` on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"FEATB1\0\0";
const HEADER_LEN: usize = 16;

pub fn encode_features(matrix: &Tensor<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.dims2()?;
    if !matrix.all_finite() {
        return Err(Error::Format("refusing to write non-finite features".into()));
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::Format(format!("{rows} rows exceed u32")))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Format(format!("{cols} cols exceed u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{rows} x {cols} overflows")))?;
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("{rows} x {cols} overflows")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Format(format!(
            "truncated payload: header says {rows} x {cols} ({payload} bytes), found {}",
            body.len()
        )));
    }
    if body.len() > payload {
        return Err(Error::Format(format!(
            "{} trailing bytes after {rows} x {cols} payload",
            body.len() - payload
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn write_features(path: &Path, matrix: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_features(matrix)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
