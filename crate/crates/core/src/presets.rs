//! Named model and training configurations shipped with the crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

const BUILTIN: [&str; 3] = [
    include_str!("../presets/tiny.json"),
    include_str!("../presets/mini.json"),
    include_str!("../presets/paper-reascan.json"),
];

pub fn builtin() -> Vec<Preset> {
    BUILTIN.iter().map(|s| serde_json::from_str(s).expect("bundled presets are valid")).collect()
}

pub fn names() -> Vec<String> {
    builtin().into_iter().map(|p| p.name).collect()
}

pub fn get(name: &str) -> Option<Preset> {
    builtin().into_iter().find(|p| p.name == name)
}

/// A builtin preset by name, or else a preset JSON file at that path.
pub fn resolve(name_or_path: &str) -> anyhow::Result<Preset> {
    if let Some(p) = get(name_or_path) {
        return Ok(p);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?);
    }
    anyhow::bail!("unknown preset {name_or_path:?}; available: {}", names().join(", "))
}
