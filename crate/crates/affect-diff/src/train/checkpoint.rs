//! Versioned checkpoint container: a JSON manifest plus all tensors (live
//! parameters, EMA shadows, optimizer moments) in the flat f64 tensor
//! encoding. Save-then-load reproduces evaluation bit-exactly.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamEntry;
use crate::data::format::tensors::{read_tensors, write_tensors, TensorMeta};
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{AffectDiff, ModelConfig};

use super::optim::AdamW;
use super::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const TENSORS_NAME: &str = "tensors.affd";

/// Stream bookkeeping stored with a checkpoint: the master seed plus the
/// epoch training should continue from. All random streams are re-derived
/// from these keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: usize,
    pub best_val_balacc: f64,
    pub adam_step: usize,
    pub data_cfg: DatasetConfig,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorMeta>,
}

/// Write a checkpoint directory (`manifest.json` + `tensors.affd`).
pub fn save_checkpoint(
    dir: &Path,
    model: &AffectDiff,
    opt: &AdamW,
    train_cfg: &TrainConfig,
    epoch: usize,
    best_val_balacc: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut named: Vec<(String, &ArrayD<f64>)> = Vec::new();
    for ParamEntry { name, value, .. } in model.params.entries() {
        named.push((format!("param/{name}"), value));
    }
    if let Some(ema) = &model.ema {
        for (shadow, &id) in ema.shadows.iter().zip(ema.ids.iter()) {
            named.push((format!("ema/{}", model.params.name(id)), shadow));
        }
    }
    let (m, v) = opt.moments();
    for (pi, entry) in model.params.entries().iter().enumerate() {
        named.push((format!("adam_m/{}", entry.name), &m[pi]));
        named.push((format!("adam_v/{}", entry.name), &v[pi]));
    }
    let tensors = write_tensors(&dir.join(TENSORS_NAME), &named)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        epoch,
        best_val_balacc,
        adam_step: opt.step_count,
        data_cfg: model.data_cfg.clone(),
        model_cfg: model.cfg.clone(),
        train_cfg: train_cfg.clone(),
        rng: RngState {
            master_seed: train_cfg.seed,
            next_epoch: epoch + 1,
        },
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// A checkpoint loaded back into memory.
pub struct LoadedCheckpoint {
    pub model: AffectDiff,
    pub opt: AdamW,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub best_val_balacc: f64,
}

/// Rebuild the model from the stored configs and overwrite every tensor
/// from the container.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("missing checkpoint manifest {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut model = AffectDiff::build(
        &manifest.data_cfg,
        &manifest.model_cfg,
        manifest.train_cfg.ablation,
        manifest.train_cfg.seed,
    )?;
    let tensors = read_tensors(&dir.join(TENSORS_NAME), &manifest.tensors)?;
    let mut adam_m: Vec<Option<ArrayD<f64>>> = vec![None; model.params.len()];
    let mut adam_v: Vec<Option<ArrayD<f64>>> = vec![None; model.params.len()];
    for (name, value) in tensors {
        if let Some(pname) = name.strip_prefix("param/") {
            let id = model
                .params
                .find(pname)
                .ok_or_else(|| Error::Format(format!("unknown parameter {pname} in checkpoint")))?;
            if model.params.value(id).shape() != value.shape() {
                return Err(Error::Format(format!("shape mismatch for {pname}")));
            }
            *model.params.value_mut(id) = value;
        } else if let Some(ename) = name.strip_prefix("ema/") {
            let id = model
                .params
                .find(ename)
                .ok_or_else(|| Error::Format(format!("unknown EMA parameter {ename}")))?;
            let ema = model
                .ema
                .as_mut()
                .ok_or_else(|| Error::Format("checkpoint has EMA tensors but model has no EMA".into()))?;
            let pos = ema
                .ids
                .iter()
                .position(|&e| e == id)
                .ok_or_else(|| Error::Format(format!("{ename} is not in the EMA group")))?;
            if ema.shadows[pos].shape() != value.shape() {
                return Err(Error::Format(format!("EMA shape mismatch for {ename}")));
            }
            ema.shadows[pos] = value;
        } else if let Some(mname) = name.strip_prefix("adam_m/") {
            let id = model
                .params
                .find(mname)
                .ok_or_else(|| Error::Format(format!("unknown moment tensor {mname}")))?;
            adam_m[id.index()] = Some(value);
        } else if let Some(vname) = name.strip_prefix("adam_v/") {
            let id = model
                .params
                .find(vname)
                .ok_or_else(|| Error::Format(format!("unknown moment tensor {vname}")))?;
            adam_v[id.index()] = Some(value);
        } else {
            return Err(Error::Format(format!("unknown tensor kind {name}")));
        }
    }
    let mut opt = AdamW::new(&model.params, manifest.train_cfg.weight_decay);
    let m: Vec<ArrayD<f64>> = adam_m
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.unwrap_or_else(|| ArrayD::zeros(model.params.entries()[i].value.raw_dim())))
        .collect();
    let v: Vec<ArrayD<f64>> = adam_v
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.unwrap_or_else(|| ArrayD::zeros(model.params.entries()[i].value.raw_dim())))
        .collect();
    opt.restore_moments(m, v, manifest.adam_step);
    Ok(LoadedCheckpoint {
        model,
        opt,
        train_cfg: manifest.train_cfg,
        epoch: manifest.epoch,
        best_val_balacc: manifest.best_val_balacc,
    })
}

