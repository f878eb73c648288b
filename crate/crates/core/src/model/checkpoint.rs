//! Checkpoint format: a JSON manifest plus a raw little-endian `f32`
//! payload holding every tensor back to back in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::init::param_specs;
use super::prompt::FOURIER_LAYOUT;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT: &str = "minipromptseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub fourier_layout: String,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` next to it (payload).
pub fn save_checkpoint<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    seed: u64,
    metadata: BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<CheckpointManifest> {
    let bin = payload_path(path);
    let mut payload = Vec::with_capacity(store.num_elements() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            constant: store.is_constant(name),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        seed,
        fourier_layout: FOURIER_LAYOUT.into(),
        payload: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: payload.len() as u64,
        tensors,
        metadata,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, ParameterStore<T>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let integrity = |msg: String| Error::Integrity(format!("{}: {msg}", path.display()));
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(integrity(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.fourier_layout != FOURIER_LAYOUT {
        return Err(integrity(format!(
            "fourier layout {:?} differs from {FOURIER_LAYOUT:?}",
            manifest.fourier_layout
        )));
    }
    manifest.config.validate()?;
    let bin = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() as u64 != manifest.payload_bytes {
        return Err(integrity(format!(
            "payload has {} bytes, manifest says {}",
            bytes.len(),
            manifest.payload_bytes
        )));
    }

    let mut expected: BTreeMap<String, Vec<usize>> = param_specs(&manifest.config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    let mut store = ParameterStore::new();
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(integrity(format!("{}: dtype {} unsupported", entry.name, entry.dtype)));
        }
        match expected.remove(&entry.name) {
            Some(shape) if shape == entry.shape => {}
            Some(shape) => {
                return Err(integrity(format!(
                    "{} has shape {:?}, config implies {shape:?}",
                    entry.name, entry.shape
                )))
            }
            None => return Err(integrity(format!("unexpected tensor {}", entry.name))),
        }
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 4;
        if end > bytes.len() {
            return Err(integrity(format!("payload truncated at {}", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        offset = end;
        let t = Tensor::new(&entry.shape, data)?;
        if entry.constant {
            store.insert_constant(entry.name.clone(), t)?;
        } else {
            store.insert(entry.name.clone(), t)?;
        }
    }
    if let Some(missing) = expected.keys().next() {
        return Err(integrity(format!("missing tensor {missing}")));
    }
    if offset != bytes.len() {
        return Err(integrity("trailing payload bytes".into()));
    }
    Ok((manifest, store))
}
