use std::path::{Path, PathBuf};

use anyhow::Context;
use invarcast_core::ingest::Grouping;
use invarcast_core::models::Arch;
use invarcast_core::semgen::{EnvType, EnvironmentSpec, DEFAULT_TEMPORAL_LENGTH};
use invarcast_core::training::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Invalid;

pub const CONFIG_VERSION: u32 = 1;

/// Real-data source: CSV files grouped into environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealData {
    pub paths: Vec<PathBuf>,
    pub grouping: Grouping,
    /// Environments held out for testing.
    pub test_envs: Vec<String>,
    /// Training environments; all remaining ones when absent.
    #[serde(default)]
    pub train_envs: Option<Vec<String>>,
}

/// One experiment. Exactly one of `preset`, `envs` and `real` names the data.
///
/// `seed` drives data generation and training; `train.seed` and
/// `train.model.arch` are replaced per run by `seed` and each entry of `archs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub preset: Option<EnvType>,
    pub envs: Option<Vec<EnvironmentSpec>>,
    pub real: Option<RealData>,
    /// Series length for `preset` environments.
    pub length: usize,
    pub replicates: usize,
    pub archs: Vec<Arch>,
    pub modes: Vec<Mode>,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            preset: Some(EnvType::Two),
            envs: None,
            real: None,
            length: DEFAULT_TEMPORAL_LENGTH,
            replicates: 5,
            archs: vec![Arch::Recurrent, Arch::Transformer],
            modes: vec![Mode::Erm, Mode::Irm],
            train: TrainConfig::default(),
            out: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Preset(EnvType),
    Explicit,
    Real,
}

impl ExperimentConfig {
    pub fn data_kind(&self) -> Result<DataKind, Invalid> {
        match (self.preset, &self.envs, &self.real) {
            (Some(p), None, None) => Ok(DataKind::Preset(p)),
            (None, Some(_), None) => Ok(DataKind::Explicit),
            (None, None, Some(_)) => Ok(DataKind::Real),
            _ => Err(Invalid("exactly one of preset, envs and real must be set".into())),
        }
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        if self.version != CONFIG_VERSION {
            return Err(Invalid(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        match self.data_kind()? {
            DataKind::Preset(_) if self.length == 0 => return Err(Invalid("length must be >= 1".into())),
            DataKind::Explicit => {
                let envs = self.envs.as_deref().unwrap_or_default();
                if envs.is_empty() {
                    return Err(Invalid("envs is empty".into()));
                }
                for e in envs {
                    e.config.validate().map_err(|err| Invalid(format!("env {}: {err}", e.env_id)))?;
                }
            }
            DataKind::Real => {
                let real = self.real.as_ref().expect("checked by data_kind");
                if real.paths.is_empty() {
                    return Err(Invalid("real.paths is empty".into()));
                }
                if real.test_envs.is_empty() {
                    return Err(Invalid("real.test_envs is empty".into()));
                }
            }
            DataKind::Preset(_) => {}
        }
        if self.replicates == 0 {
            return Err(Invalid("replicates must be >= 1".into()));
        }
        if self.archs.is_empty() || self.modes.is_empty() {
            return Err(Invalid("archs and modes must be non-empty".into()));
        }
        self.train.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(())
    }

    /// Training settings for one architecture and mode.
    pub fn train_config(&self, arch: Arch, mode: Mode) -> TrainConfig {
        let mut t = self.train.clone();
        t.model.arch = arch;
        t.mode = mode;
        t.seed = self.seed;
        t
    }

    /// Human-readable name of the data source.
    pub fn data_label(&self) -> String {
        match self.data_kind() {
            Ok(DataKind::Preset(p)) => format!("Env-Type={p}"),
            Ok(DataKind::Explicit) => "explicit environments".into(),
            Ok(DataKind::Real) => "real data".into(),
            Err(_) => "invalid".into(),
        }
    }
}

/// Command-line overrides layered on a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Reads a config (or the defaults when `path` is `None`), applies
/// overrides and validates. Relative `real.paths` resolve against the
/// config file's directory.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    // the default preset only applies when no other source is named
    if let Some(obj) = value.as_object_mut() {
        if !obj.contains_key("preset") && (obj.contains_key("envs") || obj.contains_key("real")) {
            obj.insert("preset".into(), Value::Null);
        }
    }
    if let Some(seed) = overrides.seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    if let Some(out) = &overrides.out {
        set_path(&mut value, "out", Value::from(out.display().to_string()))?;
    }
    for item in &overrides.set {
        let (key, raw) = item.split_once('=').ok_or_else(|| Invalid(format!("--set expects key=value, got {item:?}")))?;
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key.trim(), parsed)?;
    }
    let mut config: ExperimentConfig = serde_json::from_value(value).map_err(|e| Invalid(format!("config: {e}")))?;
    if let (Some(base), Some(real)) = (path.and_then(Path::parent), config.real.as_mut()) {
        for p in &mut real.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Sets a dotted key such as `train.model.hidden`, creating objects on the
/// way. Setting one data source clears the others.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Invalid> {
    if key.is_empty() {
        return Err(Invalid("empty --set key".into()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    if let ["preset" | "envs" | "real", ..] = parts.as_slice() {
        if let Some(obj) = root.as_object_mut() {
            for other in ["preset", "envs", "real"].into_iter().filter(|k| *k != parts[0]) {
                obj.insert(other.into(), Value::Null);
            }
        }
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.get(*part).is_some_and(Value::is_object) {
            node.as_object_mut().ok_or_else(|| Invalid(format!("--set {key}: {part} is not inside an object")))?.insert(part.to_string(), Value::Object(Default::default()));
        }
        node = node.get_mut(*part).expect("inserted above");
    }
    node.as_object_mut()
        .ok_or_else(|| Invalid(format!("--set {key}: parent is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
