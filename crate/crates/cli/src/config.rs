//! The JSON config file: every `TrainConfig` key at top level, plus
//! `dataset` and `out_dir`. Unknown keys are rejected; absent keys take the
//! training defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccs::trainer::TrainConfig;
use serde_json::Value;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(mut map) = value else {
            bail!("config must be a JSON object");
        };
        let mut path = |key: &str| -> Result<Option<PathBuf>> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => bail!("{key} must be a string, got {other}"),
            }
        };
        let dataset = path("dataset")?;
        let out_dir = path("out_dir")?;
        let train: TrainConfig =
            serde_json::from_value(Value::Object(map)).context("invalid training settings")?;
        train.validate()?;
        Ok(ConfigFile {
            dataset,
            out_dir,
            train,
        })
    }

    /// Reads `path`; relative dataset and output paths resolve against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<&Path> {
        match &self.dataset {
            Some(p) => Ok(p),
            None => bail!("config has no dataset path"),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
