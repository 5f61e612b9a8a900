//! Binary checkpoint: one line of JSON header, then every parameter as
//! little-endian `f32` in `ParamSet` order, then (for resumable training
//! checkpoints) the momentum buffers in the same layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::TrainingState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::classifier::{ClassifierConfig, MsSopClassifier};

pub const FORMAT: &str = "msop-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config: ClassifierConfig,
    params: Vec<ParamEntry>,
    training: Option<TrainingState>,
}

/// Optimizer and curriculum state needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub state: TrainingState,
    pub velocity: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MsSopClassifier,
    pub training: Option<TrainingSnapshot>,
}

impl Checkpoint {
    pub fn new(model: MsSopClassifier) -> Self {
        Self {
            model,
            training: None,
        }
    }

    /// Serialises the checkpoint. Values are narrowed to `f32`; a model
    /// trained with single-precision SGD loses nothing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let ps = self.model.params();
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: self.model.seed(),
            config: self.model.config().clone(),
            params: ps
                .names()
                .iter()
                .zip(ps.tensors())
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            training: self.training.as_ref().map(|t| t.state.clone()),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        let mut put = |values: &[f64]| {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for t in ps.tensors() {
            put(t.data());
        }
        if let Some(t) = &self.training {
            for v in &t.velocity {
                put(v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Version("missing checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Version(format!("unreadable checkpoint header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Version(format!(
                "not a checkpoint (format `{}`)",
                header.format
            )));
        }
        if header.version != VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        let mut model = MsSopClassifier::new(header.config, header.seed)
            .map_err(|e| Error::Version(format!("checkpoint architecture is invalid: {e}")))?;
        let ps = model.params();
        if ps.len() != header.params.len()
            || ps
                .names()
                .iter()
                .zip(ps.tensors())
                .zip(&header.params)
                .any(|((n, t), e)| *n != e.name || t.shape() != e.shape.as_slice())
        {
            return Err(Error::Version(
                "checkpoint parameter layout does not match its architecture".into(),
            ));
        }
        let sizes: Vec<usize> = ps.tensors().iter().map(Tensor::numel).collect();
        let n_params: usize = sizes.iter().sum();
        let payload = &bytes[nl + 1..];
        let expected = 4 * n_params * if header.training.is_some() { 2 } else { 1 };
        if payload.len() != expected {
            return Err(Error::Version(format!(
                "checkpoint payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
        let tensors = ps
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), take(t.numel())))
            .collect::<Result<Vec<_>>>()?;
        model.params_mut().load(tensors)?;
        let training = header.training.map(|state| TrainingSnapshot {
            state,
            velocity: sizes.iter().map(|&n| take(n)).collect(),
        });
        Ok(Self { model, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
