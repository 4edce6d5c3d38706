//! Flat TOML run configuration: training hyperparameters plus paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Keys that belong to the run rather than to [`TrainConfig`].
const PATH_KEYS: [&str; 7] = [
    "sod_manifest",
    "cod_manifest",
    "connection_manifest",
    "out_dir",
    "pretrained",
    "resume",
    "device",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunPaths {
    sod_manifest: Option<PathBuf>,
    cod_manifest: Option<PathBuf>,
    connection_manifest: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    resume: Option<PathBuf>,
    device: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sod_manifest: Option<PathBuf>,
    pub cod_manifest: Option<PathBuf>,
    pub connection_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub device: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sod_manifest: None,
            cod_manifest: None,
            connection_manifest: None,
            out_dir: PathBuf::from("runs/default"),
            pretrained: None,
            resume: None,
            device: "cpu".into(),
        }
    }
}

fn config_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    // toml names the offending key between backticks
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".into());
    Error::Config { field, message }
}

impl RunConfig {
    /// Parses a flat table; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(config_error)?;
        let (paths, train): (toml::Table, toml::Table) =
            table.into_iter().partition(|(k, _)| PATH_KEYS.contains(&k.as_str()));
        for (k, v) in &train {
            if v.is_table() {
                return Err(Error::Config {
                    field: k.clone(),
                    message: "nested tables are not allowed".into(),
                });
            }
        }
        let paths: RunPaths = paths.try_into().map_err(config_error)?;
        let train: TrainConfig = train.try_into().map_err(config_error)?;
        let cfg = Self {
            train,
            sod_manifest: paths.sod_manifest,
            cod_manifest: paths.cod_manifest,
            connection_manifest: paths.connection_manifest,
            out_dir: paths.out_dir.unwrap_or_else(|| RunConfig::default().out_dir),
            pretrained: paths.pretrained,
            resume: paths.resume,
            device: paths.device.unwrap_or_else(|| "cpu".into()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config {
                field: "device".into(),
                message: format!("unsupported device {:?}; only \"cpu\" is available", self.device),
            });
        }
        self.train.validate()
    }

    /// Serializes every field, so the output re-parses to an equal value.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.train).map_err(|e| Error::Serde(e.to_string()))?;
        let paths = RunPaths {
            sod_manifest: self.sod_manifest.clone(),
            cod_manifest: self.cod_manifest.clone(),
            connection_manifest: self.connection_manifest.clone(),
            out_dir: Some(self.out_dir.clone()),
            pretrained: self.pretrained.clone(),
            resume: self.resume.clone(),
            device: Some(self.device.clone()),
        };
        let paths = toml::Table::try_from(&paths).map_err(|e| Error::Serde(e.to_string()))?;
        table.extend(paths);
        toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))
    }
}
