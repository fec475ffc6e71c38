//! The single JSON document that configures every subcommand.

use std::fs;
use std::path::Path;

use nirnormal::evaluator::Smoother;
use nirnormal::synth::{DatasetManifest, Split};
use nirnormal::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: DatasetManifest,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub infer: InferOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            dataset: DatasetManifest::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            infer: InferOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    pub smoother: Smoother,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            smoother: Smoother::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferOptions {
    pub mesh: bool,
    /// Multiplier applied to depth when writing mesh vertices.
    pub mesh_scale: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            mesh: false,
            mesh_scale: 1.0,
        }
    }
}

/// Reads a JSON document. A missing or unreadable file is an I/O failure,
/// bad JSON or unknown keys a configuration failure.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg: RunConfig = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if cfg.version != RUN_CONFIG_VERSION {
        return Err(Failure::config(format!(
            "unsupported config version {} (expected {RUN_CONFIG_VERSION})",
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Writes the resolved config, defaults included, to `path`.
pub fn echo<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}
