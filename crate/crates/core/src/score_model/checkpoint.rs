//! Checkpoint files: `checkpoint.safetensors` holds live parameters, the EMA
//! shadow and optimizer moments; `checkpoint.json` records the architecture,
//! noise schedule, EMA decay, step count and data normalization.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{ScoreNet, ScoreNetParams, UNetConfig, Weights};
use crate::data::Normalization;
use crate::sde::NoiseSchedule;
use crate::training::AdamState;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "petsynth-checkpoint/1";
const BLOB: &str = "checkpoint.safetensors";
const SIDECAR: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub unet: UNetConfig,
    pub schedule: NoiseSchedule,
    pub ema_decay: f64,
    pub step_count: u64,
    pub normalization: Option<Normalization>,
    pub dtype: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ScoreNetParams,
    pub optimizer: Option<AdamState>,
}

fn blob_path(dir: &Path) -> PathBuf {
    dir.join(BLOB)
}

fn sidecar_path(dir: &Path) -> PathBuf {
    dir.join(SIDECAR)
}

pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    params: &ScoreNetParams,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for (k, v) in &params.live {
        tensors.insert(format!("live/{k}"), v.as_tensor().detach());
    }
    for (k, v) in &params.ema {
        tensors.insert(format!("ema/{k}"), v.clone());
    }
    if let Some(opt) = optimizer {
        for (k, v) in &opt.first_moment {
            tensors.insert(format!("adam.m/{k}"), v.clone());
        }
        for (k, v) in &opt.second_moment {
            tensors.insert(format!("adam.v/{k}"), v.clone());
        }
        tensors.insert(
            "adam.step".to_string(),
            Tensor::new(&[opt.step as f64], &Device::Cpu)?,
        );
    }
    let meta = CheckpointMeta {
        step_count: params.step_count,
        ..meta.clone()
    };
    // Write to temporaries first so an interrupted save never leaves a torn pair.
    let tmp_blob = dir.join(format!("{BLOB}.tmp"));
    candle_core::safetensors::save(&tensors, &tmp_blob)?;
    let tmp_side = dir.join(format!("{SIDECAR}.tmp"));
    fs::write(&tmp_side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&tmp_side, e))?;
    fs::rename(&tmp_blob, blob_path(dir)).map_err(|e| Error::io(dir, e))?;
    fs::rename(&tmp_side, sidecar_path(dir)).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = sidecar_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointMismatch {
            field: "format".into(),
            detail: format!("expected `{CHECKPOINT_FORMAT}`, found `{}`", meta.format),
        });
    }
    Ok(meta)
}

fn diff_config(expected: &UNetConfig, found: &UNetConfig) -> Result<()> {
    let e = serde_json::to_value(expected)?;
    let f = serde_json::to_value(found)?;
    if let (Some(e), Some(f)) = (e.as_object(), f.as_object()) {
        for (key, ev) in e {
            if f.get(key) != Some(ev) {
                return Err(Error::CheckpointMismatch {
                    field: format!("unet.{key}"),
                    detail: format!("config has {ev}, checkpoint has {}", f.get(key).cloned().unwrap_or_default()),
                });
            }
        }
    }
    Ok(())
}

fn diff_schedule(expected: &NoiseSchedule, found: &NoiseSchedule) -> Result<()> {
    let fields = [
        ("schedule.sigma_min", expected.sigma_min, found.sigma_min),
        ("schedule.sigma_max", expected.sigma_max, found.sigma_max),
    ];
    for (name, e, f) in fields {
        if e != f {
            return Err(Error::CheckpointMismatch {
                field: name.into(),
                detail: format!("config has {e}, checkpoint has {f}"),
            });
        }
    }
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, the sidecar must agree with
/// it (the sampling step count `N` is free to differ).
pub fn load_checkpoint(dir: &Path, expected: Option<(&UNetConfig, &NoiseSchedule)>) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    if let Some((cfg, schedule)) = expected {
        diff_config(cfg, &meta.unet)?;
        diff_schedule(schedule, &meta.schedule)?;
    }
    let blob = blob_path(dir);
    let tensors = candle_core::safetensors::load(&blob, &Device::Cpu)?;
    let mut live = BTreeMap::new();
    let mut ema = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut adam_step = None;
    for (key, tensor) in tensors {
        if let Some(name) = key.strip_prefix("live/") {
            live.insert(name.to_string(), Var::from_tensor(&tensor)?);
        } else if let Some(name) = key.strip_prefix("ema/") {
            ema.insert(name.to_string(), tensor);
        } else if let Some(name) = key.strip_prefix("adam.m/") {
            m.insert(name.to_string(), tensor);
        } else if let Some(name) = key.strip_prefix("adam.v/") {
            v.insert(name.to_string(), tensor);
        } else if key == "adam.step" {
            adam_step = Some(tensor.to_vec1::<f64>()?[0] as u64);
        } else {
            return Err(Error::CheckpointMismatch {
                field: "tensors".into(),
                detail: format!("unexpected tensor `{key}`"),
            });
        }
    }
    let params = ScoreNetParams {
        live,
        ema,
        step_count: meta.step_count,
    };
    params.validate()?;
    // Key set and shapes must match the recorded architecture.
    ScoreNet::from_params(&meta.unet, &meta.schedule, &params, Weights::Live).map_err(|e| {
        Error::CheckpointMismatch {
            field: "tensors".into(),
            detail: e.to_string(),
        }
    })?;
    let optimizer = adam_step.map(|step| AdamState {
        step,
        first_moment: m,
        second_moment: v,
    });
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}
