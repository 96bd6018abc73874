//! Checkpoint file: one JSON document.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "params": { "spec": {..}, "tensors": [ {"v":1,"dim":[r,c],"data":[..]}, .. ] },
//!   "optimizer": { "beta1", "beta2", "eps", "m": [..], "v": [..], "step" },
//!   "entropy_alpha": f64,
//!   "alpha_optimizer": { same layout as "optimizer", one 1x1 tensor },
//!   "updates": u64
//! }
//! ```
//!
//! Tensors appear in the order of [`Slot`](super::Slot).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: PolicyParams,
    pub optimizer: Adam,
    pub entropy_alpha: f64,
    pub alpha_optimizer: Adam,
    pub updates: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: ckpt.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}
