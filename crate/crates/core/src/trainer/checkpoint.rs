use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogRow, TrainConfig};
use crate::io;
use crate::network::Model;
use crate::{Error, Result};

pub const WEIGHTS_NAME: &str = "weights.ot";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Rows of loss history kept in the manifest.
const LOSS_TAIL: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub parameter_count: i64,
    pub training_step: usize,
    pub phase: u8,
    pub dataset_hash: String,
    pub loss_tail: Vec<LogRow>,
    pub schedule: String,
    pub ctft_sites: Vec<usize>,
    pub tag: Option<String>,
    pub version: String,
}

impl CheckpointManifest {
    pub fn new(
        config: &TrainConfig,
        model: &Model,
        training_step: usize,
        phase: u8,
        dataset_hash: &str,
        history: &[LogRow],
        tag: Option<String>,
    ) -> Self {
        let tail = history[history.len().saturating_sub(LOSS_TAIL)..].to_vec();
        let ctft_sites = if config.network.ablation.ctft_enabled {
            model.net.ctft.iter().map(|(s, _)| *s).collect()
        } else {
            Vec::new()
        };
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            parameter_count: model.parameter_count(),
            training_step,
            phase,
            dataset_hash: dataset_hash.to_string(),
            loss_tail: tail,
            schedule: config.schedule.describe().to_string(),
            ctft_sites,
            tag,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Checks that the stored hash matches the stored configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.config.hash() != self.config_hash {
            return Err(Error::Config(
                "checkpoint manifest config_hash does not match its config".into(),
            ));
        }
        Ok(())
    }
}

/// Trained weights plus their manifest.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    /// Writes `weights.ot` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        let weights = dir.join(WEIGHTS_NAME);
        self.model.save(&weights)?;
        io::write_json_atomic(&dir.join(MANIFEST_NAME), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let weights = dir.join(WEIGHTS_NAME);
        for p in [&manifest_path, &weights] {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file missing"),
                ));
            }
        }
        let manifest: CheckpointManifest = io::read_json(&manifest_path)?;
        manifest.validate()?;
        let model = Model::load(&manifest.config.network, &weights)?;
        if model.parameter_count() != manifest.parameter_count {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters but its manifest records {}",
                model.parameter_count(),
                manifest.parameter_count
            )));
        }
        Ok(Self { model, manifest })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.manifest.config
    }
}
