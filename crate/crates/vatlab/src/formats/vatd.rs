//! `VATD` dataset cache.
//!
//! ```text
//! "VATD" u8 version  u32 name_len  name (utf-8)
//! u64 rows  u64 cols  u8 has_labels  f64 inputs[rows*cols]  [u32 labels[rows]]
//! ```

use std::fs;
use std::path::Path;

use vatlab_core::{Dataset, Tensor};

use super::Cursor;
use crate::error::{Result, VatlabError};

pub const MAGIC: &[u8; 4] = b"VATD";
pub const VERSION: u8 = 1;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(d.name.len() as u32).to_le_bytes());
    out.extend_from_slice(d.name.as_bytes());
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d.dim() as u64).to_le_bytes());
    out.push(u8::from(d.labels.is_some()));
    for v in d.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in d.labels.iter().flatten() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::new(bytes, "dataset cache");
    if c.take(4)? != MAGIC {
        return Err(VatlabError::Data("dataset cache: bad magic, expected VATD".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(VatlabError::Data(format!("dataset cache: unsupported version {}", version)));
    }
    let name_len = c.u32_le()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| VatlabError::Data("dataset cache: name is not utf-8".into()))?;
    let rows = c.u64_le()? as usize;
    let cols = c.u64_le()? as usize;
    let labeled = c.u8()? != 0;
    let x = (0..rows * cols).map(|_| c.f64_le()).collect::<Result<Vec<_>>>()?;
    let y = if labeled {
        Some((0..rows).map(|_| c.u32_le().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    c.finish()?;
    Ok(Dataset::new(&name, Tensor::matrix(rows, cols, x)?, y)?)
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(d)).map_err(VatlabError::io(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path).map_err(VatlabError::io(path))?)
}
