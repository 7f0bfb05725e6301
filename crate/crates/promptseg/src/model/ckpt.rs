//! Self-describing checkpoint container.
//!
//! Layout: 4-byte magic, u32 format version, u64 manifest length, a JSON
//! manifest (tensor names/shapes, dtype, config echo, free-form metadata),
//! then every tensor as little-endian f64 in manifest order. Loading
//! validates the magic, version, and payload size; restoring into a model
//! additionally validates every name and shape.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SEGC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// A checkpoint in memory: the config echo it was saved with, named tensors
/// (model parameters, plus any optimizer state under an `opt/` prefix), and
/// free-form metadata such as the iteration counter.
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Tensors whose names do not start with `opt/` (the model parameters).
    pub fn param_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().filter(|(n, _, _)| !n.starts_with("opt/")).cloned().collect()
    }

    pub fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let manifest = Manifest {
        format_version: VERSION,
        dtype: "f64".to_string(),
        config: ckpt.config_text.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    for (name, shape, values) in &ckpt.tensors {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Checkpoint(format!("{name}: {} values vs shape {shape:?}", values.len())));
        }
    }
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&manifest_bytes).map_err(io)?;
    let mut buf = Vec::new();
    for (_, _, values) in &ckpt.tensors {
        buf.clear();
        buf.reserve(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file (bad magic)", path.display())));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format version {version} (expected {VERSION})")));
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf).map_err(io)?;
    let mlen = u64::from_le_bytes(u64buf) as usize;
    let mut mbytes = vec![0u8; mlen];
    f.read_exact(&mut mbytes).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported tensor dtype {:?}", manifest.dtype)));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(io)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest declares {} values",
            payload.len(),
            expected
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut at = 0usize;
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let values: Vec<f64> = payload[at..at + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += n * 8;
        tensors.push((entry.name.clone(), entry.shape.clone(), values));
    }
    Ok(Checkpoint { config_text: manifest.config, tensors, meta: manifest.meta })
}
