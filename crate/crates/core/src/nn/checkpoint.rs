//! JSON checkpoints: format tag, version, configuration, seed and the flat
//! parameter vector. Floats round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{net_init, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "diffinfo-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    pub seed: u64,
    pub shapes: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            seed: params.seed,
            shapes: params.slices().iter().map(|s| s.len()).collect(),
            values: params.to_flat(),
        }
    }

    pub fn into_params(self) -> Result<NetworkParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut params = net_init(self.config, self.seed)?;
        let shapes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        if shapes != self.shapes {
            return Err(Error::Checkpoint("parameter shapes do not match configuration".into()));
        }
        params.set_flat(&self.values)?;
        Ok(params)
    }
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from_params(params))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<Checkpoint>(&text)?.into_params()
}
