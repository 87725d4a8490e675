//! JSON checkpoints.
//!
//! Numbers are written with shortest round-trip formatting and maps are
//! ordered, so save -> load -> save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, AdapterConfig};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, ModelState};
use crate::prior::PriorSpec;
use crate::tensor::Matrix;
use crate::train::TrainMeta;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub mode: Mode,
    pub adapter_config: Option<AdapterConfig>,
    pub base: BTreeMap<String, Matrix>,
    pub adapters: BTreeMap<String, Adapter>,
    pub prior: Option<PriorSpec>,
    pub training: TrainMeta,
}

impl Checkpoint {
    pub fn new(state: &ModelState, prior: Option<PriorSpec>, training: TrainMeta) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model_config: state.config.clone(),
            mode: state.mode,
            adapter_config: state.adapter_config.clone(),
            base: state.base.clone(),
            adapters: state.adapters.clone(),
            prior,
            training,
        }
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            config: self.model_config.clone(),
            mode: self.mode,
            base: self.base.clone(),
            adapter_config: self.adapter_config.clone(),
            adapters: self.adapters.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    /// Parses and validates every shape against the model configuration.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::json(path, e))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        ckpt.state()
            .validate()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(ckpt)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
