//! MGEM binary vector files.
//!
//! Layout (little-endian): magic `MGEM`, `u32` version, `u32` dim, `u64`
//! rows, then `rows * dim` row-major `f32` values. Row ids live in a sibling
//! JSONL file with one `{"row": i, "id": "..."}` object per line.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGEM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFile {
    pub dim: usize,
    pub rows: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    row: usize,
    id: String,
}

pub fn encode(dim: usize, data: &[f32]) -> Vec<u8> {
    let rows = data.len().checked_div(dim).unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<VectorFile> {
    let bad = |reason: &str| Error::corrupt(origin, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad("shorter than the MGEM header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported MGEM version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("row count overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(bad(&format!(
            "expected {expected} payload bytes for {rows}x{dim}, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VectorFile { dim, rows, data })
}

/// Sidecar id file for an `.mgem` path: `x.mgem` -> `x.ids.jsonl`.
pub fn ids_path(mgem: &Path) -> PathBuf {
    let stem = mgem
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    mgem.with_file_name(format!("{stem}.ids.jsonl"))
}

pub fn encode_ids(ids: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for (row, id) in ids.iter().enumerate() {
        let line = serde_json::to_string(&IdLine {
            row,
            id: id.clone(),
        })
        .expect("id line serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn write(path: &Path, dim: usize, data: &[f32], ids: &[String]) -> Result<()> {
    fs::write(path, encode(dim, data)).map_err(|e| Error::io(path, e))?;
    let idp = ids_path(path);
    fs::write(&idp, encode_ids(ids)).map_err(|e| Error::io(&idp, e))
}

/// Reads a vector file and its id sidecar.
pub fn read(path: &Path) -> Result<(VectorFile, Vec<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let vf = decode(&bytes, path)?;
    let idp = ids_path(path);
    let file = fs::File::open(&idp).map_err(|e| Error::io(&idp, e))?;
    let mut ids = Vec::with_capacity(vf.rows);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&idp, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: IdLine = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(&idp, format!("line {}: {e}", n + 1)))?;
        if parsed.row != ids.len() {
            return Err(Error::corrupt(
                &idp,
                format!(
                    "line {}: expected row {}, found {}",
                    n + 1,
                    ids.len(),
                    parsed.row
                ),
            ));
        }
        ids.push(parsed.id);
    }
    if ids.len() != vf.rows {
        return Err(Error::corrupt(
            &idp,
            format!("{} ids for {} rows", ids.len(), vf.rows),
        ));
    }
    Ok((vf, ids))
}
