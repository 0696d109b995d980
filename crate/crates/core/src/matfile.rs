//! Binary matrix container.
//!
//! Layout: an 8-byte magic, two little-endian `u64` dimensions (rows, cols),
//! then `rows * cols` little-endian floats in row-major order.
//!
//! * `COGMAT01` carries `f32` payloads (the interchange format for data).
//! * `COGMAT02` carries `f64` payloads and is used by checkpoints, where
//!   parameters must round-trip exactly.
//!
//! Plain CSV (one matrix row per line) is accepted on read for matrices with
//! fewer than 10^6 entries.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC_F32: &[u8; 8] = b"COGMAT01";
pub const MAGIC_F64: &[u8; 8] = b"COGMAT02";
const MAGIC_PREFIX: &[u8; 6] = b"COGMAT";
const HEADER_LEN: usize = 24;
const CSV_MAX_ENTRIES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode_matrix(a: ArrayView2<'_, f64>, precision: Precision) -> Vec<u8> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + a.len() * width);
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Decodes one binary matrix from the front of `bytes`, returning it together
/// with the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f64>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("matrix header".into()));
    }
    let magic = &bytes[..8];
    let precision = if magic == MAGIC_F32 {
        Precision::F32
    } else if magic == MAGIC_F64 {
        Precision::F64
    } else if &magic[..6] == MAGIC_PREFIX {
        return Err(Error::Version(format!(
            "matrix container `{}`",
            String::from_utf8_lossy(magic)
        )));
    } else {
        return Err(Error::Format("missing matrix magic".into()));
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    let end = n
        .checked_mul(width)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    if bytes.len() < end {
        return Err(Error::Truncated(format!(
            "matrix payload: {rows}x{cols} needs {end} bytes, got {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..end];
    let data: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let a = Array2::from_shape_vec((rows, cols), data).expect("length checked above");
    Ok((a, end))
}

pub fn write_matrix(path: &Path, a: ArrayView2<'_, f64>, precision: Precision) -> Result<()> {
    fs::write(path, encode_matrix(a, precision)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC_PREFIX) {
        let (a, used) = decode_matrix(&bytes).map_err(|e| annotate(e, path))?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after matrix payload",
                path.display(),
                bytes.len() - used
            )));
        }
        Ok(a)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{}: neither binary nor CSV", path.display())))?;
        parse_csv(&text).map_err(|e| annotate(e, path))
    }
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        Error::Version(m) => Error::Version(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn parse_csv(text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: cannot parse `{}`", lineno + 1, field.trim()))
            })?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::Format(format!(
                    "line {}: expected {c} fields, found {n}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        rows += 1;
        if data.len() >= CSV_MAX_ENTRIES {
            return Err(Error::Format(format!(
                "CSV matrices must have fewer than {CSV_MAX_ENTRIES} entries"
            )));
        }
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("consistent row lengths"))
}

/// Reads a vector stored as a single-row or single-column matrix.
pub fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let a = read_matrix(path)?;
    if a.nrows() == 1 || a.ncols() == 1 {
        Ok(Array1::from_iter(a.iter().copied()))
    } else {
        Err(Error::shape(
            format!("vector file {}", path.display()),
            "1 x n or n x 1",
            format!("{} x {}", a.nrows(), a.ncols()),
        ))
    }
}
