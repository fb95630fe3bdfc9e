use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sonar_core::trainer::TrainConfig;

use crate::Failure;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Canonical `key = value` text of the resolved config.
    pub config: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub timestamp: u64,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_path: None,
            config: None,
            inputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seeds: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: Option<&Path>, cfg: &TrainConfig) -> Self {
        self.config_path = path.map(Path::to_path_buf);
        self.config = Some(cfg.to_text());
        self.seeds.push(cfg.seed);
        self
    }

    pub fn write(&self) -> Result<(), Failure> {
        let text = toml::to_string(self).map_err(|e| Failure::Input(format!("manifest: {e}")))?;
        std::fs::write(self.out_dir.join(format!("{}.manifest.toml", self.command)), text)?;
        Ok(())
    }
}
