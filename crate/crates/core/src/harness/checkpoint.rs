//! Versioned parameter snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub step: u64,
    pub config: RunConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture(model: &Model, cfg: &RunConfig, step: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_digest: cfg.digest(),
            step,
            config: cfg.clone(),
            params: model.store.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.config.digest() != ck.config_digest {
            return Err(Error::Checkpoint("config digest does not match".into()));
        }
        Ok(ck)
    }

    /// Copies the snapshot into `model`, which must have the same architecture.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        model.store.load_values(&self.params)
    }

    /// Builds the model described by the stored config and restores it.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.config.model.clone())?;
        self.restore_into(&mut m)?;
        Ok(m)
    }
}
