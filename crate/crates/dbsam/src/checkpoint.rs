//! Model checkpoints and pseudo-pretrained frozen weights, both in DBSM.
//!
//! A checkpoint holds every tensor of the model's [`ParamStore`] in
//! registration order with its role; the architecture itself comes from the
//! [`ModelConfig`], which training writes next to the checkpoint.

use std::path::{Path, PathBuf};

use dbsam_core::{DbSamModel, ModelConfig, ParamRole, ParamStore};

use crate::dbsm::{self, Record};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.dbsm";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_FILE: &str = "loss.csv";

/// The config file expected beside a checkpoint.
pub fn config_beside(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name(CONFIG_FILE)
}

pub fn save(path: &Path, model: &DbSamModel) -> Result<()> {
    dbsm::save(path, &dbsm::store_records(&model.store))
}

fn check_match(name: &str, store: &ParamStore, r: &Record) -> Result<()> {
    let p = store.by_name(name).expect("caller looked the name up");
    if p.role != r.role {
        return Err(Error::Format(format!("{name}: stored as {:?}, model has {:?}", r.role, p.role)));
    }
    if p.value.shape() != r.tensor.shape() {
        return Err(Error::Format(format!("{name}: stored shape {:?}, model has {:?}", r.tensor.shape(), p.value.shape())));
    }
    Ok(())
}

/// Overwrites every tensor of `store` from `records`, which must name each
/// one exactly once with the same role and shape.
pub fn restore(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model has {}", records.len(), store.len())));
    }
    for r in records {
        let id = store.id(&r.name).ok_or_else(|| Error::Format(format!("unexpected tensor {}", r.name)))?;
        check_match(&r.name, store, r)?;
        store.set_value(id, r.tensor.clone())?;
    }
    // equal counts and unique store names leave only duplicates to rule out
    let mut names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Format(format!("duplicate tensor {}", w[0])));
    }
    Ok(())
}

/// Rebuilds the model described by `config` and fills it from `path`.
pub fn load(path: &Path, config: &ModelConfig) -> Result<DbSamModel> {
    let config = ModelConfig {
        pretrained: None,
        ..config.clone()
    };
    let mut model = DbSamModel::new(config)?;
    let records = dbsm::load(path)?;
    restore(&mut model.store, &records).map_err(|e| e.in_file(path))?;
    Ok(model)
}

/// A checkpoint together with the config saved beside it.
pub fn load_with_config(path: &Path) -> Result<DbSamModel> {
    let config = crate::config_file::load(&config_beside(path))?;
    load(path, &config)
}

/// The frozen tensors only: the pseudo-pretrained weights.
pub fn frozen_records(model: &DbSamModel) -> Vec<Record> {
    dbsm::store_records(&model.store)
        .into_iter()
        .filter(|r| r.role == ParamRole::Frozen)
        .collect()
}

/// Copies every frozen tensor of `store` from the frozen records in `records`.
pub fn restore_frozen(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    let names: Vec<String> = store.names_with_role(ParamRole::Frozen).into_iter().map(String::from).collect();
    for name in names {
        let r = records
            .iter()
            .find(|r| r.name == name && r.role == ParamRole::Frozen)
            .ok_or_else(|| Error::Format(format!("pretrained weights lack frozen tensor {name}")))?;
        check_match(&name, store, r)?;
        let id = store.id(&name).expect("name came from the store");
        store.set_value(id, r.tensor.clone())?;
    }
    Ok(())
}

/// [`DbSamModel::new`], then the frozen weights from `config.pretrained` if set.
pub fn build_model(config: &ModelConfig) -> Result<DbSamModel> {
    let mut model = DbSamModel::new(config.clone())?;
    if let Some(p) = &config.pretrained {
        let path = Path::new(p);
        let records = dbsm::load(path)?;
        restore_frozen(&mut model.store, &records).map_err(|e| e.in_file(path))?;
    }
    Ok(model)
}
