//! Run manifests: what a command read, what it wrote, and checksums.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST_SCHEMA: &str = "spinterp-run/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> CliResult<Self> {
        let data = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    /// Effective non-path settings of the run.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Collects a manifest while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: u128,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now_ms(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self) -> CliResult<RunManifest> {
        let artifacts = |paths: Vec<PathBuf>| -> CliResult<Vec<Artifact>> {
            let mut paths = paths;
            paths.sort();
            paths.dedup();
            paths.iter().map(|p| Artifact::of(p)).collect()
        };
        let config_hash = sha256_hex(self.config.to_string().as_bytes());
        Ok(RunManifest {
            schema: RUN_MANIFEST_SCHEMA.to_string(),
            command: self.command,
            config: self.config,
            config_hash,
            seed: self.seed,
            inputs: artifacts(self.inputs)?,
            outputs: artifacts(self.outputs)?,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        })
    }

    pub fn write(self, path: &Path) -> CliResult<RunManifest> {
        let m = self.finish()?;
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(m)
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
