//! Run configuration: one TOML document with `[data]`, `[train]` and
//! `[metrics]` tables. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `Imgs/` and `GT/`.
    pub train_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

/// Parses `key.path=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("--override", format!("`{spec}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config("--override", format!("bad key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for (i, k) in parents.iter().enumerate() {
        let entry = cur.entry(k.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::config(path[..=i].join("."), "is not a table and cannot hold sub-keys")
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.train.validate()?;
        cfg.metrics.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Self::from_table(table)
    }

    /// Reads `path` and applies `overrides` (each `key.path=value`) before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: Table = toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Every configured dataset root must be an existing directory.
    pub fn check_paths(&self) -> Result<()> {
        let roots = [
            ("data.train_root", Some(&self.data.train_root)),
            ("data.val_root", self.data.val_root.as_ref()),
            ("data.test_root", self.data.test_root.as_ref()),
        ];
        for (field, p) in roots {
            if let Some(p) = p {
                if !p.is_dir() {
                    return Err(Error::config(field, format!("{} is not a directory", p.display())));
                }
            }
        }
        if let Some(p) = &self.train.model.backbone.pretrained {
            if !p.is_file() {
                return Err(Error::config("train.model.backbone.pretrained", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Desk-scale profile reading a dataset under `root/train` and `root/test`.
    pub fn toy(root: &Path) -> Self {
        let mut train = TrainConfig::desk();
        train.lr = 1e-3;
        train.epochs = 50;
        train.checkpoint_every = 0;
        RunConfig {
            data: DataConfig {
                train_root: root.join("train"),
                val_root: None,
                test_root: Some(root.join("test")),
            },
            train,
            metrics: MetricConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\ntrain_root = \"d\"\n";

    #[test]
    fn defaults_fill_missing_tables() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.metrics, MetricConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[data]\ntrain_root = \"d\"\n[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let (k, v) = parse_override("train.lr=1e-3").unwrap();
        assert_eq!(k, ["train", "lr"]);
        assert_eq!(v, Value::Float(1e-3));
        assert_eq!(parse_override("data.train_root=some/dir").unwrap().1, Value::String("some/dir".into()));
        assert_eq!(parse_override("train.augment = false").unwrap().1, Value::Boolean(false));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::toy(Path::new("/tmp/toy"));
        c.train.max_steps = Some(7);
        c.train.model.backbone.pretrained = Some("w.safetensors".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        let paper = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(RunConfig::parse(&paper.to_toml()).unwrap(), paper);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::parse("[data]\ntrain_root = \"d\"\n[train]\nbatch_size = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "train.batch_size"));
    }
}
