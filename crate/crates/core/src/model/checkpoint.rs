//! Checkpoints: a JSON manifest beside a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::net::{param_shapes, Model, Param};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "spikegrid-checkpoint";
const VERSION: u32 = 1;

/// Adam moments, one entry per model parameter in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Epochs completed when saved.
    pub epoch: usize,
    /// Root seed of the run; shuffling for epoch `e` is derived from it.
    pub seed: u64,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    epoch: usize,
    seed: u64,
    optimizer_step: Option<u64>,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("f32")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len() / 4,
        });
        for &v in data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for p in &ckpt.model.params {
        put(p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        for (p, (m, v)) in ckpt
            .model
            .params
            .iter()
            .zip(opt.first.iter().zip(&opt.second))
        {
            put(format!("adam.m/{}", p.name), p.tensor.shape().to_vec(), m);
            put(format!("adam.v/{}", p.name), p.tensor.shape().to_vec(), v);
        }
    }
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: ckpt.model.config.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex(&Sha256::digest(&blob)),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::format(&blob_file, "checksum mismatch"));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let read = |entry: &TensorEntry| -> Result<Vec<f64>> {
        let n: usize = entry.shape.iter().product();
        floats
            .get(entry.offset..entry.offset + n)
            .map(|s| s.iter().map(|&v| f64::from(v)).collect())
            .ok_or_else(|| {
                Error::format(
                    &blob_file,
                    format!("tensor {} runs past the blob", entry.name),
                )
            })
    };
    let find = |name: &str| manifest.tensors.iter().find(|t| t.name == name);

    let expected =
        param_shapes(&manifest.config).map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry =
            find(name).ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if &entry.shape != shape {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    entry.shape
                ),
            ));
        }
        params.push(Param {
            name: name.clone(),
            tensor: Tensor::new(shape, read(entry)?)?,
        });
    }
    let optimizer = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (name, _) in &expected {
                for (prefix, out) in [("adam.m/", &mut first), ("adam.v/", &mut second)] {
                    let key = format!("{prefix}{name}");
                    let entry = find(&key)
                        .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
                    out.push(read(entry)?);
                }
            }
            Some(OptimizerState {
                step,
                first,
                second,
            })
        }
    };
    Ok(Checkpoint {
        model: Model {
            config: manifest.config,
            params,
        },
        epoch: manifest.epoch,
        seed: manifest.seed,
        optimizer,
    })
}

/// Load and require the stored architecture to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model.config != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was built for {:?}, expected {:?}",
            path.display(),
            ckpt.model.config,
            expected
        )));
    }
    Ok(ckpt)
}
