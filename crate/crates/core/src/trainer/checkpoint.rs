//! Checkpoint directory: `manifest.json` plus one raw little-endian payload
//! per array, named `<tensor name>.<dtype>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{io_err, Schedule, TrainError, TrainState};
use crate::network::{DualBranchNet, NetworkConfig};
use crate::nn::{Parameterized, Slot};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    pub best_val_dice: Option<f64>,
    pub schedule: Schedule,
    pub net: NetworkConfig,
    pub optimizer: AdamConfig,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CorruptCheckpoint(msg.into())
}

fn file_name<T: Scalar>(name: &str, role: TensorRole) -> String {
    match role {
        TensorRole::Param | TensorRole::Buffer => format!("{name}.{}", T::DTYPE),
        TensorRole::AdamM => format!("{name}.adam_m.{}", T::DTYPE),
        TensorRole::AdamV => format!("{name}.adam_v.{}", T::DTYPE),
    }
}

fn encode<T: Scalar>(a: &ArrayD<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * T::WIDTH);
    for &v in a.iter() {
        v.put_le(&mut out);
    }
    out
}

/// Writes `state` into the directory `path`, replacing existing payloads.
pub fn save_checkpoint<T: Scalar>(state: &mut TrainState<T>, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut arrays: Vec<(TensorEntry, Vec<u8>)> = Vec::new();
    let mut param_names = Vec::new();
    state.model.visit("", &mut |name, slot| {
        let (role, value) = match slot {
            Slot::Param(p) => {
                param_names.push(name.to_string());
                (TensorRole::Param, &p.value)
            }
            Slot::Buffer(b) => (TensorRole::Buffer, &*b),
        };
        let entry = TensorEntry {
            name: name.to_string(),
            role,
            shape: value.shape().to_vec(),
            file: file_name::<T>(name, role),
        };
        arrays.push((entry, encode(value)));
    });
    let opt = &state.optimizer;
    if !opt.m.is_empty() {
        for (i, name) in param_names.iter().enumerate() {
            for (role, moment) in [(TensorRole::AdamM, &opt.m[i]), (TensorRole::AdamV, &opt.v[i])] {
                let entry = TensorEntry {
                    name: name.clone(),
                    role,
                    shape: moment.shape().to_vec(),
                    file: file_name::<T>(name, role),
                };
                arrays.push((entry, encode(moment)));
            }
        }
    }
    for (entry, bytes) in &arrays {
        let p = dir.join(&entry.file);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        step: state.step,
        best_val_dice: state.best_val_dice,
        schedule: state.schedule,
        net: state.model.config.clone(),
        optimizer: opt.config,
        adam_t: opt.t,
        tensors: arrays.into_iter().map(|(e, _)| e).collect(),
    };
    let p = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| io_err(&p, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest, TrainError> {
    let p = path.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(format!("missing {}", p.display())),
        _ => io_err(&p, e),
    })?;
    serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", p.display())))
}

fn read_payload<T: Scalar>(dir: &Path, entry: &TensorEntry) -> Result<ArrayD<T>, TrainError> {
    if entry.file.contains(['/', '\\']) || entry.file.starts_with("..") {
        return Err(corrupt(format!("payload path {:?} escapes the checkpoint", entry.file)));
    }
    let p = dir.join(&entry.file);
    let bytes = fs::read(&p).map_err(|e| corrupt(format!("{}: {e}", p.display())))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * T::WIDTH {
        return Err(corrupt(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            entry.file,
            bytes.len(),
            entry.shape,
            n * T::WIDTH
        )));
    }
    let values: Vec<T> = bytes.chunks_exact(T::WIDTH).map(T::get_le).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked"))
}

/// Restores a state written by [`save_checkpoint`], bit-exactly.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>, TrainError> {
    let dir = path.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(corrupt(format!("checkpoint holds {}, expected {}", manifest.dtype, T::DTYPE)));
    }
    let mut model = DualBranchNet::<T>::new(manifest.net.clone(), 0)
        .map_err(|e| corrupt(format!("network config: {e}")))?;

    let mut by_key: BTreeMap<(String, TensorRole), &TensorEntry> = BTreeMap::new();
    for e in &manifest.tensors {
        if by_key.insert((e.name.clone(), e.role), e).is_some() {
            return Err(corrupt(format!("duplicate tensor {} ({:?})", e.name, e.role)));
        }
    }
    let has_moments = manifest.adam_t > 0;
    let mut failure: Option<TrainError> = None;
    let mut used = 0usize;
    let mut m = Vec::new();
    let mut v = Vec::new();
    model.visit("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let role = match slot {
            Slot::Param(_) => TensorRole::Param,
            Slot::Buffer(_) => TensorRole::Buffer,
        };
        let mut fetch = |role: TensorRole, shape: &[usize]| -> Result<ArrayD<T>, TrainError> {
            let entry = by_key
                .get(&(name.to_string(), role))
                .ok_or_else(|| corrupt(format!("manifest lacks {name} ({role:?})")))?;
            if entry.shape != shape {
                return Err(corrupt(format!(
                    "{name} ({role:?}) has shape {:?}, network expects {shape:?}",
                    entry.shape
                )));
            }
            used += 1;
            read_payload(dir, entry)
        };
        let result = match slot {
            Slot::Param(p) => fetch(role, p.value.shape()).and_then(|value| {
                p.value = value;
                if has_moments {
                    m.push(fetch(TensorRole::AdamM, p.value.shape())?);
                    v.push(fetch(TensorRole::AdamV, p.value.shape())?);
                }
                Ok(())
            }),
            Slot::Buffer(b) => fetch(role, b.shape()).map(|value| *b = value),
        };
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != manifest.tensors.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, network uses {used}",
            manifest.tensors.len()
        )));
    }
    let optimizer = Adam {
        config: manifest.optimizer,
        t: manifest.adam_t,
        m,
        v,
    };
    Ok(TrainState::from_parts(
        model,
        optimizer,
        manifest.step,
        manifest.schedule,
        manifest.best_val_dice,
    ))
}
