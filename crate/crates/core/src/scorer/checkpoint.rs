//! Self-describing checkpoint container.
//!
//! Tensors are stored as base64 little-endian `f64` blobs so a save/load
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Backbone, Mat, Trainable};
use super::{init_models, ModelSet, ScorerConfig, ScorerError};
use crate::io::{self, IoError};

pub const FORMAT: &str = "avem-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("not a checkpoint: format {0:?}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl TensorBlob {
    pub fn encode(name: &str, t: &Mat) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { name: name.to_string(), rows: t.nrows(), cols: t.ncols(), data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Mat, CheckpointError> {
        let err = |message: String| CheckpointError::Tensor { name: self.name.clone(), message };
        let bytes = STANDARD.decode(&self.data).map_err(|e| err(e.to_string()))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(err(format!("expected {} bytes, found {}", self.rows * self.cols * 8, bytes.len())));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Array2::from_shape_vec((self.rows, self.cols), values).map_err(|e| err(e.to_string()))
    }
}

pub fn encode_all<'a>(tensors: impl IntoIterator<Item = (String, &'a Mat)>) -> Vec<TensorBlob> {
    tensors.into_iter().map(|(n, t)| TensorBlob::encode(&n, t)).collect()
}

pub fn restore_into(dst: Vec<(String, &mut Mat)>, blobs: &[TensorBlob]) -> Result<(), CheckpointError> {
    let by_name: BTreeMap<&str, &TensorBlob> = blobs.iter().map(|b| (b.name.as_str(), b)).collect();
    if by_name.len() != dst.len() {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            message: format!("expected {} tensors, found {}", dst.len(), by_name.len()),
        });
    }
    for (name, t) in dst {
        let blob = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::Tensor { name: name.clone(), message: "missing".into() })?;
        let m = blob.decode()?;
        if m.raw_dim() != t.raw_dim() {
            return Err(CheckpointError::Tensor {
                name,
                message: format!("shape {:?} does not match model {:?}", m.shape(), t.shape()),
            });
        }
        *t = m;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ScorerConfig,
    pub seed: u64,
    pub step: u64,
    /// Text vocabulary used to tokenize records, when known.
    #[serde(default)]
    pub vocabulary: Vec<String>,
    pub backbone: Vec<TensorBlob>,
    pub policy: Vec<TensorBlob>,
    pub reference: Vec<TensorBlob>,
    /// Auxiliary tensor groups, e.g. optimizer state.
    #[serde(default)]
    pub extra: BTreeMap<String, Vec<TensorBlob>>,
    /// Free-form metadata, e.g. the training configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_models(models: &ModelSet, step: u64) -> Self {
        let cfg = models.policy.config().clone();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: cfg.seed,
            config: cfg,
            step,
            vocabulary: Vec::new(),
            backbone: encode_all(models.reference.backbone().tensors()),
            policy: encode_all(models.policy.trainable().expect("policy has adapters").tensors()),
            reference: encode_all(models.reference.trainable().expect("reference has adapters").tensors()),
            extra: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Rebuilds the model set; shapes come from the stored config.
    pub fn to_models(&self) -> Result<ModelSet, CheckpointError> {
        let template = init_models(&self.config)?;
        let mut backbone: Backbone = template.reference.backbone().clone();
        restore_into(backbone.tensors_mut(), &self.backbone)?;
        let mut policy: Trainable = template.policy.trainable().expect("policy has adapters").clone();
        restore_into(policy.tensors_mut(), &self.policy)?;
        let mut reference: Trainable = policy.clone();
        restore_into(reference.tensors_mut(), &self.reference)?;
        Ok(ModelSet::from_parts(self.config.clone(), backbone, policy, reference))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        io::write_json(path, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = io::read_json(path)?;
        if ck.format != FORMAT {
            return Err(CheckpointError::Format(ck.format));
        }
        if ck.version != VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        Ok(ck)
    }
}
