//! Flat named-tensor container: a binary blob of little-endian `f64`
//! values and a JSON manifest mapping each name to its shape and offset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_FORMAT: &str = "fuselite-weights";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub version: u32,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named tensors in order.
pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> (Vec<u8>, WeightsManifest) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        total_bytes: blob.len() as u64,
        tensors: entries,
    };
    (blob, manifest)
}

/// Parses a blob against its manifest, checking every entry's extent.
pub fn decode_tensors(
    blob: &[u8],
    manifest: &WeightsManifest,
    path: &Path,
) -> Result<Vec<(String, Tensor)>> {
    let corrupt = |reason: String| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.format != WEIGHTS_FORMAT {
        return Err(corrupt(format!(
            "unknown container format `{}`",
            manifest.format
        )));
    }
    if manifest.version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: WEIGHTS_VERSION,
        });
    }
    if manifest.total_bytes != blob.len() as u64 {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(corrupt(format!(
                "tensor `{}` has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start
            .checked_add(n * 8)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "tensor `{}` extends past the end of the blob",
                    e.name
                ))
            })?;
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    bin: &Path,
    manifest: &Path,
) -> Result<()> {
    let (blob, m) = encode_tensors(tensors);
    std::fs::write(bin, blob)?;
    std::fs::write(manifest, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn read_tensors(bin: &Path, manifest: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = std::fs::read_to_string(manifest)?;
    let m: WeightsManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptArtifact {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let blob = std::fs::read(bin)?;
    decode_tensors(&blob, &m, bin)
}

/// Checks names and shapes against `ps` and returns the values in store
/// order.
pub fn match_store(
    ps: &ParamStore,
    tensors: Vec<(String, Tensor)>,
    path: &Path,
) -> Result<Vec<Tensor>> {
    let corrupt = |reason: String| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason,
    };
    if tensors.len() != ps.len() {
        return Err(corrupt(format!(
            "container holds {} tensors, model has {}",
            tensors.len(),
            ps.len()
        )));
    }
    ps.iter()
        .zip(tensors)
        .map(|(p, (name, t))| {
            if p.name != name {
                return Err(corrupt(format!(
                    "expected tensor `{}`, found `{name}`",
                    p.name
                )));
            }
            if p.value.shape() != t.shape() {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            Ok(t)
        })
        .collect()
}

pub fn save_params(ps: &ParamStore, bin: &Path, manifest: &Path) -> Result<()> {
    write_tensors(
        ps.iter().map(|p| (p.name.as_str(), &p.value)),
        bin,
        manifest,
    )
}

pub fn load_params(ps: &mut ParamStore, bin: &Path, manifest: &Path) -> Result<()> {
    let values = match_store(ps, read_tensors(bin, manifest)?, bin)?;
    ps.restore(&values);
    Ok(())
}
