use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CenterProfile;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "MINIPROMPTSEG_";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory containing `manifest.json`.
    pub dir: Option<PathBuf>,
    /// Custom center profiles for `gen-data`; built-ins when empty.
    pub profiles: Vec<CenterProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: Option<String>,
    pub train_centers: BTreeSet<String>,
    pub held_out_centers: BTreeSet<String>,
}

/// Everything a run depends on; echoed to `resolved_config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
}

fn parse_env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `MINIPROMPTSEG_<SECTION>__<KEY>=value` overrides (keys are
/// matched case-insensitively; values are parsed as JSON, else taken as
/// strings).
pub fn apply_env_overrides(
    mut doc: Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Value> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let rest = &key[ENV_PREFIX.len()..];
        let Some((section, field)) = rest.split_once("__") else {
            continue;
        };
        let (section, field) = (section.to_ascii_lowercase(), field.to_ascii_lowercase());
        if !["model", "train", "data", "protocol"].contains(&section.as_str()) {
            return Err(Error::Config(format!("{key}: unknown config section {section:?}")));
        }
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?
            .entry(section)
            .or_insert_with(|| Value::Object(Default::default()));
        let obj = obj
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: section is not an object")))?;
        obj.insert(field, parse_env_value(&raw));
    }
    Ok(doc)
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies environment overrides
    /// and validates the model and training sections.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let doc = apply_env_overrides(doc, env)?;
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for p in &self.data.profiles {
            p.validate()?;
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }
}
