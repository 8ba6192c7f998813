//! Binary matrix files used as descriptor sidecars and for PCA projectors.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `HLOC`                    |
//! | 4      | 4    | format version (u32)            |
//! | 8      | 4    | row dimension (u32)             |
//! | 12     | 8    | row count (u64)                 |
//! | 20     | ...  | rows, row-major                 |
//!
//! Descriptor matrices (version [`F32_VERSION`]) store `f32` values. Projector
//! files (version [`F64_VERSION`]) store `f64` values so orthonormality survives
//! a round trip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HLOC";
pub const F32_VERSION: u32 = 1;
pub const F64_VERSION: u32 = 2;
const HEADER_LEN: usize = 20;

fn header(version: u32, dim: usize, count: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&version.to_le_bytes());
    h[8..12].copy_from_slice(&(dim as u32).to_le_bytes());
    h[12..20].copy_from_slice(&(count as u64).to_le_bytes());
    h
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::BinaryFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `data` as `data.len() / dim` rows of `f32`.
pub fn write_f32_matrix(path: &Path, dim: usize, data: &[f32]) -> Result<()> {
    let count = if dim == 0 { 0 } else { data.len() / dim };
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    bytes.extend_from_slice(&header(F32_VERSION, dim, count));
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &bytes)
}

/// Writes `data` as `count` rows of `f64` with the given dimension.
pub fn write_f64_matrix(path: &Path, dim: usize, count: usize, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * 8);
    bytes.extend_from_slice(&header(F64_VERSION, dim, count));
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Raw {
    dim: usize,
    count: usize,
    payload: Vec<u8>,
}

fn read_raw(path: &Path, version: u32) -> Result<Raw> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(format_error(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_error(path, "bad magic"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(format_error(
            path,
            format!("format version {found}, expected {version}"),
        ));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = bytes.split_off(HEADER_LEN);
    Ok(Raw {
        dim,
        count,
        payload,
    })
}

/// Reads an `f32` matrix; returns `(dim, count, row-major values)`.
pub fn read_f32_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let raw = read_raw(path, F32_VERSION)?;
    if raw.payload.len() != raw.dim * raw.count * 4 {
        return Err(format_error(
            path,
            format!(
                "payload has {} bytes, header declares {} x {} f32",
                raw.payload.len(),
                raw.count,
                raw.dim
            ),
        ));
    }
    let values = raw
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((raw.dim, raw.count, values))
}

/// Reads an `f64` matrix; the payload length is left to the caller to check
/// since projector files append trailing vectors.
pub fn read_f64_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let raw = read_raw(path, F64_VERSION)?;
    if raw.payload.len() % 8 != 0 {
        return Err(format_error(path, "payload is not a whole number of f64"));
    }
    let values = raw
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((raw.dim, raw.count, values))
}
