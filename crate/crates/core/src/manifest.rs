//! Reproducibility record written next to every CLI output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            config_path: None,
            checkpoint_path: None,
            seed: None,
        }
    }

    pub fn with_config(mut self, path: Option<&Path>) -> Self {
        self.config_path = path.map(|p| p.display().to_string());
        self
    }

    pub fn with_checkpoint(mut self, path: Option<&Path>) -> Self {
        self.checkpoint_path = path.map(|p| p.display().to_string());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
