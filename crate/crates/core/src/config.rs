//! Experiment manifest: one JSON file with `section.field=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{OvtError, Result};
use crate::eval::EvalConfig;
use crate::gradcheck::GradCheckConfig;
use crate::model::pretrain::ModelConfig;
use crate::synthdata::GenSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Copied into every section's own seed by [`ExperimentConfig::finalize`].
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gen: GenSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            gen: GenSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` (dot separated) in `root`. The key must already exist.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| OvtError::Config(format!("unknown config key `{key}`")))?;
    }
    *node = parse_value(raw);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OvtError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OvtError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| OvtError::Config(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut value, key.trim(), raw.trim())?;
        }
        serde_json::from_value(value).map_err(|e| OvtError::Config(e.to_string()))
    }

    /// Propagates the top-level seed and validates every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.gradcheck.validate()?;
        Ok(self)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
