use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ssnet::{io, Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance record written into every output directory at the end of a
/// command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path to SHA-256 (files) or content hash (datasets).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_seconds: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.input_hash(path, &io::sha256_hex(&bytes));
        Ok(())
    }

    pub fn input_hash(&mut self, path: &Path, hash: &str) {
        self.inputs.insert(path.display().to_string(), hash.to_string());
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_seconds = started.elapsed().as_secs_f64();
        io::create_dir(dir)?;
        io::write_json_atomic(&dir.join(RUN_MANIFEST), &self)
    }
}
