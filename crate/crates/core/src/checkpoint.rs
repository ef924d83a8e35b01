//! Versioned JSON checkpoints holding the model config, every parameter
//! matrix, the training config and the optimizer state.
//!
//! Floats are written with shortest round-trip formatting, so a
//! save/load cycle reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{GrnError, Result};
use crate::model::{GrnConfig, GrnModel};
use crate::tensor::Matrix;
use crate::training::{AdamState, TrainConfig};

pub const FORMAT: &str = "grn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: GrnConfig,
    pub train: Option<TrainConfig>,
    pub best_epoch: Option<usize>,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: &GrnModel, train: Option<&TrainConfig>, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            train: train.cloned(),
            best_epoch: None,
            params: model.store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some(name) = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| n)
        {
            return Err(GrnError::Checkpoint(format!("parameter `{name}` is not finite")));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| GrnError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(GrnError::Checkpoint(format!("not a checkpoint file (format `{}`)", ck.format)));
        }
        if ck.version != VERSION {
            return Err(GrnError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ck.version
            )));
        }
        let opt = ck.optimizer.iter().flat_map(|o| o.m.iter().chain(&o.v));
        for m in ck.params.values().iter().chain(opt) {
            check_matrix(m)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rebuilds the model, rejecting parameters that do not fit the config.
    pub fn to_model(&self) -> Result<GrnModel> {
        let model = GrnModel::from_parts(self.model.clone(), self.params.clone())?;
        if let Some(opt) = &self.optimizer {
            let shapes_match = opt.m.len() == self.params.len()
                && opt.v.len() == self.params.len()
                && self.params.values().iter().zip(&opt.m).all(|(p, m)| p.shape() == m.shape());
            if !shapes_match {
                return Err(GrnError::Checkpoint("optimizer state does not match the parameters".into()));
            }
        }
        Ok(model)
    }
}

fn check_matrix(m: &Matrix) -> Result<()> {
    if m.data().len() != m.rows() * m.cols() {
        return Err(GrnError::Checkpoint(format!(
            "matrix declares {}x{} but holds {} values",
            m.rows(),
            m.cols(),
            m.data().len()
        )));
    }
    Ok(())
}
