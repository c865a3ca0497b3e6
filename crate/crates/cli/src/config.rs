use std::fs;
use std::path::{Path, PathBuf};

use mole::model::find_preset;
use mole::trainer::TrainConfig;
use mole::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};

/// Byte-level vocabulary used by the toy presets and the built-in corpus.
pub const BYTE_VOCAB: usize = 256;

pub const BUILTIN_CORPUS: &str = include_str!("../data/corpus.txt");

/// Desk-scale presets trained on bytes. The MoE preset uses ten experts with
/// top-2 routing so offload benchmarks match the ten-expert cache analysis.
pub fn toy_preset(name: &str) -> Option<ModelConfig> {
    let v = BYTE_VOCAB;
    let cfg = match name {
        "toy-dense" => ModelConfig::dense(2, 64, 4, 256, v),
        "toy-moe" => ModelConfig::moe(2, 64, 4, 128, 10, 2, v),
        "toy-moe-34e" => ModelConfig::moe(2, 64, 4, 128, 34, 2, v),
        "toy-mole" => ModelConfig::mole(2, 64, 4, 256, 256, 4, v),
        "toy-mole-16e" => ModelConfig::mole(2, 64, 4, 256, 256, 16, v),
        _ => return None,
    };
    Some(cfg.with_max_seq(1024))
}

pub const TOY_PRESETS: [&str; 5] = ["toy-dense", "toy-moe", "toy-moe-34e", "toy-mole", "toy-mole-16e"];

/// Toy presets by name, or full-size table rows such as `"410M MoE-10E"`.
pub fn resolve_preset(name: &str) -> CliResult<ModelConfig> {
    toy_preset(name)
        .or_else(|| find_preset(name).map(|p| p.config))
        .ok_or_else(|| {
            CliError::usage(format!(
                "preset: unknown preset {name:?} (toy presets: {}; or a table row like \"160M MoLE-4E\")",
                TOY_PRESETS.join(", ")
            ))
        })
}

/// Contents of a `--config` file. Precedence, lowest first: built-in
/// defaults, `preset`, the explicit `model` / `train` objects, command-line
/// flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Training text, read as bytes. Relative paths resolve against the
    /// config file's directory.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

pub struct LoadedConfig {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    pub run: RunConfig,
}

pub fn load_run_config(path: &Path) -> CliResult<LoadedConfig> {
    let bytes = fs::read(path).at(path)?;
    let mut run: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if let Some(c) = run.corpus.as_mut() {
        if c.is_relative() {
            *c = path.parent().unwrap_or(Path::new(".")).join(&*c);
        }
    }
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        bytes,
        run,
    })
}

/// Model config from (in rising precedence) the file's preset, the file's
/// model object and a preset flag.
pub fn model_from(run: Option<&RunConfig>, preset_flag: Option<&str>) -> CliResult<ModelConfig> {
    if let Some(name) = preset_flag {
        return resolve_preset(name);
    }
    if let Some(run) = run {
        if let Some(m) = &run.model {
            return Ok(m.clone());
        }
        if let Some(name) = &run.preset {
            return resolve_preset(name);
        }
    }
    Err(CliError::usage(
        "model: no model given (use --preset, or a config file with \"preset\" or \"model\")",
    ))
}

/// Bytes of a text file, or the built-in corpus.
pub fn load_corpus(path: Option<&Path>) -> CliResult<Vec<u32>> {
    let bytes = match path {
        Some(p) => fs::read(p).at(p)?,
        None => BUILTIN_CORPUS.as_bytes().to_vec(),
    };
    Ok(bytes.into_iter().map(u32::from).collect())
}

/// Parses a model config file: either a bare model object or a list of
/// `{"label": ..., "model": {...}}` entries.
pub fn load_model_list(path: &Path) -> CliResult<Vec<(String, ModelConfig)>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        label: String,
        model: ModelConfig,
    }
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum File {
        One(ModelConfig),
        Many(Vec<Entry>),
    }
    let bytes = fs::read(path).at(path)?;
    let parsed: File = serde_json::from_slice(&bytes)
        .or_else(|_| {
            // Re-parse as a single model to surface a field-level message.
            serde_json::from_slice::<ModelConfig>(&bytes).map(File::One)
        })
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let list = match parsed {
        File::One(m) => {
            let label = path
                .file_stem()
                .map_or("custom".into(), |s| s.to_string_lossy().into_owned());
            vec![(label, m)]
        }
        File::Many(v) => v.into_iter().map(|e| (e.label, e.model)).collect(),
    };
    for (label, m) in &list {
        m.validate().map_err(|e| CliError::usage(format!("{label}: {e}")))?;
    }
    Ok(list)
}
