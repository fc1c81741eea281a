use std::path::Path;

use serde::{Deserialize, Serialize};

use super::agent::Agent;
use super::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "spowl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A JSON document holding everything needed to resume acting or evaluating:
/// `{format, version, step, episodes, config, agent}`. Floats are written in
/// shortest round-trip form, so save/load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Environment steps taken when the checkpoint was written.
    pub step: usize,
    pub episodes: usize,
    pub config: RunConfig,
    pub agent: Agent,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(step: usize, episodes: usize, config: RunConfig, agent: Agent) -> Self {
        Self { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, step, episodes, config, agent }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let header: Header =
            serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: not a checkpoint ({e})", path.display())))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Load(format!("{}: unexpected format {:?}", path.display(), header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                header.version
            )));
        }
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}
