//! Portable binary model files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SWNN"  version  K  p  q  n_layers  (n_out, n_in) × n_layers
//! then for each layer: weights row-major (n_out × n_in), then n_out biases,
//! as little-endian f64
//! ```
//!
//! Hidden layers use tanh and the output layer is linear; neither is stored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FlockError, Result};
use crate::nn::mlp::{Architecture, MlpParams};

pub const MAGIC: &[u8; 4] = b"SWNN";
pub const FORMAT_VERSION: u32 = 1;

/// Everything in a model file except the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelHeader {
    pub version: u32,
    pub architecture: Architecture,
}

impl ModelHeader {
    pub fn parameter_count(&self) -> usize {
        self.architecture.parameter_count()
    }
}

pub fn encode_model(params: &MlpParams) -> Vec<u8> {
    let arch = params.architecture();
    let dims = arch.layer_dims();
    let mut out = Vec::with_capacity(24 + 8 * dims.len() + 8 * params.as_slice().len());
    out.extend_from_slice(MAGIC);
    for word in [
        FORMAT_VERSION,
        arch.history_depth as u32,
        arch.feature_dim as u32,
        arch.output_dim as u32,
        dims.len() as u32,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for (o, i) in dims {
        out.extend_from_slice(&(o as u32).to_le_bytes());
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(FlockError::ModelFormat(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode_header(cur: &mut Cursor<'_>) -> Result<ModelHeader> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FlockError::ModelFormat(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "SWNN"
        )));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FlockError::ModelFormat(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let k = cur.u32("K")? as usize;
    let p = cur.u32("p")? as usize;
    let q = cur.u32("q")? as usize;
    let n_layers = cur.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(FlockError::ModelFormat(format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let o = cur.u32("layer dims")? as usize;
        let i = cur.u32("layer dims")? as usize;
        dims.push((o, i));
        if l > 0 && dims[l - 1].0 != i {
            return Err(FlockError::ModelFormat(format!(
                "layer {l} takes {i} inputs but layer {} emits {}",
                l - 1,
                dims[l - 1].0
            )));
        }
    }
    let hidden: Vec<usize> = dims[..n_layers - 1].iter().map(|&(o, _)| o).collect();
    let arch = Architecture::new(k, p, hidden, q)
        .map_err(|e| FlockError::ModelFormat(format!("invalid architecture: {e}")))?;
    if arch.layer_dims() != dims {
        return Err(FlockError::ModelFormat(format!(
            "layer dims {dims:?} inconsistent with K={k}, p={p}, q={q}"
        )));
    }
    Ok(ModelHeader {
        version,
        architecture: arch,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpParams> {
    let mut cur = Cursor { bytes, at: 0 };
    let header = decode_header(&mut cur)?;
    let count = header.parameter_count();
    let body = cur.take(8 * count, "parameters")?;
    if cur.at != bytes.len() {
        return Err(FlockError::ModelFormat(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cur.at
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    MlpParams::from_flat(&header.architecture, values)
        .map_err(|e| FlockError::ModelFormat(format!("bad parameters: {e}")))
}

pub fn save_model(params: &MlpParams, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_model(params))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpParams> {
    decode_model(&fs::read(path)?)
}

/// Loads a model and checks it against the history depth and feature width
/// the caller will feed it.
pub fn load_model_for(path: &Path, history_depth: usize, feature_dim: usize) -> Result<MlpParams> {
    let params = load_model(path)?;
    check_architecture(&params, history_depth, feature_dim)?;
    Ok(params)
}

pub fn check_architecture(params: &MlpParams, history_depth: usize, feature_dim: usize) -> Result<()> {
    let arch = params.architecture();
    if arch.history_depth != history_depth || arch.feature_dim != feature_dim {
        return Err(FlockError::ArchitectureMismatch(format!(
            "model has K={}, p={}; evaluator is configured for K={history_depth}, p={feature_dim}",
            arch.history_depth, arch.feature_dim
        )));
    }
    Ok(())
}

/// Reads only the header (and layer table) of a model file.
pub fn read_header(path: &Path) -> Result<ModelHeader> {
    let mut f = fs::File::open(path)?;
    let mut fixed = [0u8; 24];
    read_exact_or_truncated(&mut f, &mut fixed)?;
    let n_layers = u32::from_le_bytes(fixed[20..24].try_into().expect("4 bytes")) as usize;
    if n_layers > 64 {
        // Let the decoder produce the error message.
        return decode_header(&mut Cursor { bytes: &fixed, at: 0 });
    }
    let mut table = vec![0u8; 8 * n_layers];
    read_exact_or_truncated(&mut f, &mut table)?;
    let mut bytes = fixed.to_vec();
    bytes.extend(table);
    let header = decode_header(&mut Cursor { bytes: &bytes, at: 0 })?;
    let expected = (bytes.len() + 8 * header.parameter_count()) as u64;
    let actual = f.metadata()?.len();
    if actual != expected {
        return Err(FlockError::ModelFormat(format!(
            "file is {actual} bytes but its header describes {expected}"
        )));
    }
    Ok(header)
}

fn read_exact_or_truncated(f: &mut fs::File, buf: &mut [u8]) -> Result<()> {
    f.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FlockError::ModelFormat("file truncated in header".into()),
        _ => FlockError::Io(e),
    })
}
