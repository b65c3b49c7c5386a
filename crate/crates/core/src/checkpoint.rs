//! Checkpoint layout: `param/<name>` for every parameter and buffer,
//! `adam.m/<name>` and `adam.v/<name>` for optimizer moments, plus metadata
//! (`format`, `model`, `config`, `config_hash`, `epoch`, `step`, `adam_t`, `metrics`).

use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::nn::ParamStore;

pub const FORMAT: &str = "fapnet-checkpoint/1";
pub const PARAM_PREFIX: &str = "param/";

pub fn store_params(store: &ParamStore, archive: &mut Archive) {
    for id in store.ids() {
        archive.insert(format!("{PARAM_PREFIX}{}", store.name(id)), store.get(id).clone());
    }
}

/// Overwrites every parameter of `store` from `archive`. Every name must be
/// present with a matching shape.
pub fn restore_params(store: &mut ParamStore, archive: &Archive) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{PARAM_PREFIX}{}", store.name(id));
        let t = archive
            .tensors
            .get(&key)
            .ok_or_else(|| Error::MissingParameter(store.name(id).to_string()))?;
        store.set(id, t.clone())?;
    }
    Ok(())
}

fn metadata<'a>(archive: &'a Archive, key: &str, path: &Path) -> Result<&'a str> {
    archive.metadata.get(key).map(String::as_str).ok_or_else(|| Error::Archive {
        path: path.to_path_buf(),
        message: format!("metadata entry `{key}` missing"),
    })
}

/// Rebuilds the model stored in `archive`. The pretrained-backbone path of
/// the stored config is ignored since the checkpoint already holds those weights.
pub fn model_from_archive(archive: &Archive, path: &Path) -> Result<Model> {
    let format = metadata(archive, "format", path)?;
    if format != FORMAT {
        return Err(Error::Archive {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint format `{format}`"),
        });
    }
    let mut config: ModelConfig = serde_json::from_str(metadata(archive, "model", path)?).map_err(|e| Error::Archive {
        path: path.to_path_buf(),
        message: format!("bad model config: {e}"),
    })?;
    config.backbone.pretrained = None;
    let mut model = Model::new(&config, 0)?;
    restore_params(&mut model.store, archive)?;
    Ok(model)
}

/// Training resolution recorded in the stored run configuration, if any.
pub fn training_input_size(archive: &Archive) -> Option<usize> {
    let config: serde_json::Value = serde_json::from_str(archive.metadata.get("config")?).ok()?;
    config.get("input_size")?.as_u64().map(|v| v as usize)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_archive(&Archive::load(path)?, path)
}
