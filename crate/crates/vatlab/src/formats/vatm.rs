//! `VATM` model files: magic, version byte, the classifier spec, then the raw
//! little-endian f64 parameters.
//!
//! ```text
//! "VATM" u8 version
//! u32 input_dim  u32 num_classes  u32 n_hidden  u32 hidden[n_hidden]
//! f64 hidden_noise_sd  u64 n_params  f64 params[n_params]
//! ```

use std::fs;
use std::path::Path;

use vatlab_core::{Classifier, ClassifierSpec, ParamSet};

use super::Cursor;
use crate::error::{Result, VatlabError};

pub const MAGIC: &[u8; 4] = b"VATM";
pub const VERSION: u8 = 1;

pub fn encode_model(model: &Classifier) -> Vec<u8> {
    let spec = &model.spec;
    let mut out = Vec::with_capacity(32 + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden_dims.len() as u32).to_le_bytes());
    for &h in &spec.hidden_dims {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.hidden_noise_sd.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for v in model.params.theta() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Classifier> {
    let mut c = Cursor::new(bytes, "model file");
    if c.take(4)? != MAGIC {
        return Err(VatlabError::Data("model file: bad magic, expected VATM".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(VatlabError::Data(format!("model file: unsupported version {}", version)));
    }
    let input_dim = c.u32_le()? as usize;
    let num_classes = c.u32_le()? as usize;
    let n_hidden = c.u32_le()? as usize;
    let hidden = (0..n_hidden).map(|_| c.u32_le().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let noise = c.f64_le()?;
    let spec = ClassifierSpec::new(input_dim, &hidden, num_classes).with_noise(noise);
    spec.validate()?;
    let n = c.u64_le()? as usize;
    if n != spec.param_count() {
        return Err(VatlabError::Data(format!("model file: {} parameters for a spec needing {}", n, spec.param_count())));
    }
    let theta = (0..n).map(|_| c.f64_le()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok(Classifier::new(spec.clone(), ParamSet::from_vec(&spec, theta)?)?)
}

pub fn save_model(path: &Path, model: &Classifier) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(VatlabError::io(path))
}

pub fn load_model(path: &Path) -> Result<Classifier> {
    decode_model(&fs::read(path).map_err(VatlabError::io(path))?)
}
