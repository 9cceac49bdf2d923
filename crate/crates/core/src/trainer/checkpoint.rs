//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per tensor (and per Adam moment).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{decode_f32_le, encode_f32_le, read_json, write_json};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, ParameterStore, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub first: String,
    pub second: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub adam: Option<AdamState>,
    pub seed: u64,
    pub step: u64,
    /// Snapshot of whatever configuration produced the tensors.
    pub config: serde_json::Value,
    /// Loop state needed to continue training exactly where it stopped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<serde_json::Value>,
}

pub struct Checkpoint {
    pub store: ParameterStore,
    pub adam: Option<Adam>,
    pub manifest: CheckpointManifest,
}

fn blob_name(name: &str, suffix: &str) -> String {
    format!("{name}{suffix}.f32")
}

fn write_blob(dir: &Path, file: &str, data: &[f64]) -> Result<()> {
    let p = dir.join(file);
    fs::write(&p, encode_f32_le(data)).map_err(|e| Error::io(&p, e))
}

fn read_blob(dir: &Path, file: &str, numel: usize) -> Result<Vec<f64>> {
    let p = dir.join(file);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let v = decode_f32_le(&bytes, &p)?;
    if v.len() != numel {
        return Err(Error::format(&p, format!("expected {numel} values, found {}", v.len())));
    }
    Ok(v)
}

/// Writes `store` (and optionally the optimizer state) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParameterStore,
    adam: Option<&Adam>,
    seed: u64,
    step: u64,
    config: serde_json::Value,
    resume: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, p) in store.iter() {
        let file = blob_name(name, "");
        write_blob(dir, &file, p.value.data())?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            file,
        });
    }
    let adam = match adam {
        None => None,
        Some(a) => {
            let mut moments = Vec::new();
            for (name, m, v) in a.moments() {
                let (first, second) = (blob_name(name, ".adam_m"), blob_name(name, ".adam_v"));
                write_blob(dir, &first, m)?;
                write_blob(dir, &second, v)?;
                moments.push(MomentEntry {
                    name: name.to_string(),
                    first,
                    second,
                });
            }
            Some(AdamState {
                config: a.config.clone(),
                step: a.step,
                moments,
            })
        }
    };
    let manifest = CheckpointManifest {
        dtype: "float32".into(),
        tensors,
        adam,
        seed,
        step,
        config,
        resume,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.dtype != "float32" {
        return Err(Error::format(&mpath, format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut store = ParameterStore::new();
    for t in &manifest.tensors {
        let numel = t.shape.iter().product();
        let data = read_blob(dir, &t.file, numel)?;
        store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.trainable)?;
    }
    let adam = match &manifest.adam {
        None => None,
        Some(state) => {
            let mut a = Adam::new(state.config.clone())?;
            a.step = state.step;
            for m in &state.moments {
                let numel = store.get(&m.name)?.numel();
                a.set_moments(&m.name, read_blob(dir, &m.first, numel)?, read_blob(dir, &m.second, numel)?);
            }
            Some(a)
        }
    };
    Ok(Checkpoint {
        store,
        adam,
        manifest,
    })
}

/// Rounds every value to `f32`, the precision checkpoints keep.
pub fn round_to_f32(store: &mut ParameterStore) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed name").data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
