//! Checkpoint directories: `manifest.json` naming every parameter with its
//! shape and byte offset into `params.bin` (little-endian f64).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vabs_autodiff::Tensor;

use super::{VabsNet, VabsNetConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "vabs-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: VabsNetConfig,
    pub params: Vec<ParamEntry>,
    /// Optimizer step at which the checkpoint was written.
    #[serde(default)]
    pub step: usize,
}

impl Manifest {
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Writes `model` into `dir` (created if needed).
pub fn save(model: &VabsNet, dir: &Path, step: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.params.n_scalars() * 8);
    let mut entries = Vec::with_capacity(model.params.len());
    for (_, name, t) in model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        params: entries,
        step,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format '{}'", m.format)));
    }
    Ok(m)
}

fn read_tensors(dir: &Path, m: &Manifest) -> Result<Vec<(String, Tensor)>> {
    let blob = fs::read(dir.join(BLOB_FILE))?;
    m.params
        .iter()
        .map(|p| {
            if p.dtype != "f64" || p.shape.len() != 2 {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}': unsupported dtype {} or rank {}",
                    p.name,
                    p.dtype,
                    p.shape.len()
                )));
            }
            let n = p.shape[0] * p.shape[1];
            let bytes = blob
                .get(p.offset..p.offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("parameter '{}' runs past the end of {BLOB_FILE}", p.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((p.name.clone(), Tensor::new(p.shape[0], p.shape[1], data)?))
        })
        .collect()
}

/// Rebuilds the model stored in `dir`.
pub fn load(dir: &Path) -> Result<VabsNet> {
    let m = read_manifest(dir)?;
    let mut model = VabsNet::new(m.config.clone())?;
    let missing = load_into(&mut model, dir, |_| false)?;
    debug_assert!(missing.is_empty());
    Ok(model)
}

/// Copies parameters from `dir` into `model`. Model parameters absent from
/// the checkpoint are an error unless `may_be_missing` accepts their name;
/// the names kept at their current values are returned.
pub fn load_into(model: &mut VabsNet, dir: &Path, may_be_missing: impl Fn(&str) -> bool) -> Result<Vec<String>> {
    let m = read_manifest(dir)?;
    let tensors = read_tensors(dir, &m)?;
    for (name, t) in tensors {
        model.params.set(&name, t)?;
    }
    let mut kept = Vec::new();
    for name in model.params.names() {
        if !m.params.iter().any(|p| &p.name == name) {
            if !may_be_missing(name) {
                return Err(Error::Checkpoint(format!("parameter '{name}' missing from checkpoint")));
            }
            kept.push(name.clone());
        }
    }
    Ok(kept)
}
