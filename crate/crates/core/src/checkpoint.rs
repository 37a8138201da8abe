//! Versioned JSON checkpoints.
//!
//! Layout (one JSON object):
//!
//! | key             | content                                            |
//! |-----------------|----------------------------------------------------|
//! | `format_version`| integer, currently [`FORMAT_VERSION`]              |
//! | `config`        | the full training configuration                    |
//! | `channel_names` | channel order the model was trained on             |
//! | `normalization` | per-channel mean and std of the training split     |
//! | `train_scores`  | Q1, Q3 and the IQR threshold of the training scores|
//! | `params`        | `[{name, shape, data}]` in model order             |
//!
//! Floats are written with shortest round-trip formatting, so loading and
//! saving again reproduces the file byte for byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::metrics::Quartiles;
use crate::model::Model;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub channel_names: Vec<String>,
    pub normalization: Normalization,
    pub train_scores: Quartiles,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        channel_names: Vec<String>,
        normalization: Normalization,
        train_scores: Quartiles,
        model: &Model,
    ) -> Self {
        let params = model
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            channel_names,
            normalization,
            train_scores,
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self) -> Result<Model> {
        // Initial values are overwritten below; the RNG only fixes structure.
        let mut model = Model::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut slots = model.named_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                self.params.len()
            )));
        }
        for ((name, slot), stored) in slots.iter_mut().zip(&self.params) {
            if *name != stored.name {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` found where `{name}` was expected",
                    stored.name
                )));
            }
            if slot.shape() != stored.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            **slot = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (this build reads version {FORMAT_VERSION})",
                v.format_version
            )));
        }
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ckpt.config.validate()?;
        if ckpt.normalization.mean.len() != ckpt.channel_names.len()
            || ckpt.normalization.std.len() != ckpt.channel_names.len()
        {
            return Err(Error::Checkpoint("normalization does not match the channel count".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
