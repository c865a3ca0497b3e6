use std::fs;
use std::path::{Path, PathBuf};

use mole::engine::EngineConfig;
use mole::trainer::TrainConfig;
use mole::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, WithPath};

pub const TOOL_VERSION: &str = concat!("mole ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl Artifact {
    pub fn of(role: &str, path: &Path) -> CliResult<Self> {
        let data = fs::read(path).at(path)?;
        Ok(Self {
            role: role.to_string(),
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Everything needed to rerun a command: the resolved settings and a digest
/// of every file read or written. Contains no timestamps, so identical runs
/// produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub engine: Option<EngineConfig>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            config_sha256: None,
            model: None,
            train: None,
            engine: None,
            seed: None,
            threads: mole::runtime_threads(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config_file(&mut self, path: &Path, bytes: &[u8]) {
        self.config_path = Some(path.to_path_buf());
        self.config_sha256 = Some(sha256_hex(bytes));
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.inputs.push(Artifact::of(role, path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.outputs.push(Artifact::of(role, path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").at(path)
    }
}

/// `<file>.manifest.json` next to an output file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}
