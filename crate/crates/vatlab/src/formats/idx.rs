//! IDX files: big-endian header, unsigned-byte payload.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use vatlab_core::{Dataset, Tensor};

use super::read_maybe_gz;
use crate::error::{Result, VatlabError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], what: &str) -> Result<IdxArray> {
    let bad = |m: String| VatlabError::Data(format!("{}: {}", what, m));
    if bytes.len() < 4 {
        return Err(bad("truncated header".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(bad(format!("bad magic 0x{:08x}", magic)));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if ndims == 0 || bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> =
        (0..ndims).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header < n {
        return Err(bad(format!("truncated payload: {} of {} bytes", bytes.len() - header, n)));
    }
    Ok(IdxArray { magic, dims, data: bytes[header..header + n].to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?, &path.display().to_string())
}

/// Images scaled to `[0, 1]` and flattened, with their labels.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, name: &str) -> Result<Dataset> {
    if images.magic != IMAGES_MAGIC {
        return Err(VatlabError::Data(format!("images: expected magic 0x{:08x}, got 0x{:08x}", IMAGES_MAGIC, images.magic)));
    }
    if labels.magic != LABELS_MAGIC {
        return Err(VatlabError::Data(format!("labels: expected magic 0x{:08x}, got 0x{:08x}", LABELS_MAGIC, labels.magic)));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(VatlabError::Data(format!("{} images but {} labels", n, labels.dims[0])));
    }
    let dim: usize = images.dims[1..].iter().product();
    let x = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let y = labels.data.iter().map(|&b| b as usize).collect();
    Ok(Dataset::new(name, Tensor::matrix(n, dim, x)?, Some(y))?)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let name = images.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset_from_idx(&read_idx(images)?, &read_idx(labels)?, &name)
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Writes an IDX file, gzip-compressed when the name ends in `.gz`.
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], data: &[u8]) -> Result<()> {
    let bytes = encode_idx(magic, dims, data);
    let file = BufWriter::new(File::create(path).map_err(VatlabError::io(path))?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(file, Compression::default());
        gz.write_all(&bytes).map_err(VatlabError::io(path))?;
        gz.finish().map_err(VatlabError::io(path))?.flush().map_err(VatlabError::io(path))?;
    } else {
        let mut f = file;
        f.write_all(&bytes).map_err(VatlabError::io(path))?;
        f.flush().map_err(VatlabError::io(path))?;
    }
    Ok(())
}
