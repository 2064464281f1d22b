//! Run configuration: a TOML file with `[train]`, `[train.encoder]`, `[eval]`
//! and `[data]` sections, plus dotted-key overrides such as
//! `train.batch_size=64`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EmptyQrels, ProbeConfig, DEFAULT_KNN_K};
use crate::index::{GraphParams, IndexMode};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub knn_k: usize,
    /// Zero-shot prompt with one `{label}` slot; empty means use descriptions.
    pub template: String,
    pub empty_qrels: EmptyQrels,
    pub index_mode: IndexMode,
    pub probe: ProbeConfig,
    pub graph: GraphParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            knn_k: DEFAULT_KNN_K,
            template: String::new(),
            empty_qrels: EmptyQrels::Skip,
            index_mode: IndexMode::Flat,
            probe: ProbeConfig::default(),
            graph: GraphParams::default(),
        }
    }
}

/// Optional default input paths; each must exist when set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub data: DataPaths,
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn apply_override(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise starts from defaults, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that every configured path exists.
    pub fn validate_paths(&self) -> Result<()> {
        for p in [&self.data.train, &self.data.heldout].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("configured path {} does not exist", p.display())));
            }
        }
        crate::eval::PromptTemplate::new(self.eval.template.clone())
            .map(|_| ())
            .or_else(|e| if self.eval.template.is_empty() { Ok(()) } else { Err(e) })
    }
}
