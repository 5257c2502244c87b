//! Versioned JSON checkpoints.
//!
//! A checkpoint holds the architecture, the model configuration, a SHA-256
//! hash of both, the parameters and running statistics, and optionally the
//! optimizer state. Loading into a model whose configuration hashes
//! differently is an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{parse_architecture, NetworkSpec, Style};
use crate::error::{Error, Result};
use crate::model::{assemble, Model, ModelConfig, ModelState};
use crate::training::AdaBelief;

pub const CHECKPOINT_FORMAT: &str = "spikenorm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub architecture: String,
    pub style: Style,
    pub model: ModelConfig,
    pub epoch: usize,
    pub state: ModelState,
    pub optimizer: Option<AdaBelief>,
}

#[derive(Serialize)]
struct Hashed<'a> {
    architecture: &'a str,
    style: Style,
    model: &'a ModelConfig,
}

/// Hex SHA-256 of the canonical architecture, style, and model configuration.
pub fn config_hash(spec: &NetworkSpec, cfg: &ModelConfig) -> String {
    let h = Hashed { architecture: &spec.render(), style: spec.style, model: cfg };
    let bytes = serde_json::to_vec(&h).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize, state: ModelState, optimizer: Option<AdaBelief>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(model.spec(), model.config()),
            architecture: model.spec().render(),
            style: model.spec().style,
            model: *model.config(),
            epoch,
            state,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let c: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let spec = parse_architecture(&c.architecture)?.with_style(c.style)?;
        if config_hash(&spec, &c.model) != c.config_hash {
            return Err(Error::Checkpoint("stored configuration does not match its hash".into()));
        }
        Ok(c)
    }

    /// Rebuilds the stored model.
    pub fn restore(&self) -> Result<Model> {
        let spec = parse_architecture(&self.architecture)?.with_style(self.style)?;
        let mut model = assemble(&spec, &self.model, 0)?;
        model.load_state(&self.state)?;
        Ok(model)
    }

    /// Loads the parameters into `model`, which must have the same configuration.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let hash = config_hash(model.spec(), model.config());
        if hash != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for {} ({}), model is {} ({})",
                self.architecture,
                &self.config_hash[..12],
                model.spec().render(),
                &hash[..12]
            )));
        }
        model.load_state(&self.state)
    }
}
