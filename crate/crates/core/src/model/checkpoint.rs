//! Self-describing JSON checkpoints with a content hash.
//!
//! The params version is a SHA-256 over the config and every tensor's name,
//! shape and little-endian bytes. Serving caches are keyed by it, so any
//! change to any parameter invalidates them.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{InferenceModel, LreaParams, ModelConfig};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

const FORMAT: &str = "lrea-checkpoint/1";

/// Trained parameters frozen together with their version hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    params: LreaParams,
    version: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    params_version: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

pub fn params_version(params: &LreaParams) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&params.config).expect("config serializes"));
    for (name, m) in params.weights.named() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

impl Checkpoint {
    pub fn new(params: LreaParams) -> Result<Self> {
        params.validate()?;
        let version = params_version(&params);
        Ok(Self { params, version })
    }

    pub fn params(&self) -> &LreaParams {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Releases the parameters for mutation; re-wrap with [`Checkpoint::new`]
    /// to get a fresh version.
    pub fn into_params(self) -> LreaParams {
        self.params
    }

    /// Materializes the weights at precision `T`.
    pub fn inference<T: Scalar>(&self) -> InferenceModel<T> {
        InferenceModel {
            config: self.params.config.clone(),
            version: self.version.clone(),
            weights: self.params.weights.cast::<T>(),
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            format: FORMAT.to_string(),
            params_version: self.version.clone(),
            config: self.params.config.clone(),
            tensors: self
                .params
                .weights
                .named()
                .into_iter()
                .map(|(name, m)| TensorRecord {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        let corrupt = |msg: String| Error::Corrupt {
            path: "<checkpoint>".into(),
            msg,
        };
        if file.format != FORMAT {
            return Err(corrupt(format!("unknown format `{}`", file.format)));
        }
        let layout = LreaParams::init(file.config.clone(), 0)?;
        let names: Vec<String> = layout.weights.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != file.tensors.len() {
            return Err(corrupt(format!(
                "expected {} tensors, found {}",
                names.len(),
                file.tensors.len()
            )));
        }
        let mut flat = Vec::with_capacity(names.len());
        for (want, rec) in names.iter().zip(file.tensors) {
            if *want != rec.name {
                return Err(corrupt(format!(
                    "expected tensor `{want}`, found `{}`",
                    rec.name
                )));
            }
            flat.push(Arc::new(Matrix::new(rec.rows, rec.cols, rec.data)?));
        }
        let params = LreaParams {
            config: file.config,
            weights: layout.weights.with_flat(flat)?,
        };
        let ckpt = Self::new(params)?;
        if ckpt.version != file.params_version {
            return Err(corrupt(format!(
                "content hash {} does not match recorded version {}",
                ckpt.version, file.params_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| match e {
            Error::Corrupt { msg, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}
