//! Model checkpoints.
//!
//! Layout: the 8-byte magic `SIGVCKP1`, a little-endian u64 manifest length,
//! a JSON manifest `[{name, shape, dtype, byte_offset}]` and the concatenated
//! little-endian f32 payload. Offsets are relative to the payload start.
//! Adam moments, when present, are stored as `adam.m.<name>` and
//! `adam.v.<name>`. The model configuration and run metadata live in a
//! `<checkpoint>.config.json` sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigver_core::autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use sigver_core::model::{ModelConfig, SiameseModel};
use sigver_core::training::TrainState;

use crate::error::{AppError, AppResult};
use crate::fsutil::{read_bytes, read_json, write_atomic, write_json};

pub const MAGIC: &[u8; 8] = b"SIGVCKP1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Subjects seen in training; evaluation refuses to score them.
    pub training_subjects: Vec<String>,
    #[serde(default)]
    pub optimizer: Option<AdamConfig>,
    #[serde(default)]
    pub optimizer_step: u64,
    #[serde(default)]
    pub train_state: Option<TrainState>,
}

/// Raw f32 tensors with their shapes, by name.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub struct Checkpoint {
    pub model: SiameseModel<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub meta: CheckpointMeta,
}

fn push_tensor(manifest: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: String, shape: &[usize], data: &[f32]) {
    manifest.push(TensorEntry {
        name,
        shape: shape.to_vec(),
        dtype: "f32".into(),
        byte_offset: payload.len() as u64,
    });
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(params: &ParamStore<f32>, optimizer: Option<&Adam<f32>>) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (_, p) in params.iter() {
        push_tensor(&mut manifest, &mut payload, p.name.clone(), p.value.shape(), p.value.data());
    }
    if let Some(opt) = optimizer {
        for (((_, p), m), v) in params.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
            push_tensor(&mut manifest, &mut payload, format!("adam.m.{}", p.name), p.value.shape(), m);
            push_tensor(&mut manifest, &mut payload, format!("adam.v.{}", p.name), p.value.shape(), v);
        }
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> AppResult<TensorMap> {
    let bad = |m: &str| AppError::format(path, format!("bad checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Vec<TensorEntry> = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[16 + len..];
    let mut out = BTreeMap::new();
    for e in manifest {
        if e.dtype != "f32" {
            return Err(bad(&format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let raw = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(&format!("{}: payload out of range", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.insert(e.name.clone(), (e.shape, data)).is_some() {
            return Err(bad(&format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

pub fn save(
    path: &Path,
    model: &SiameseModel<f32>,
    optimizer: Option<&Adam<f32>>,
    meta: &CheckpointMeta,
) -> AppResult<()> {
    write_atomic(path, &encode(model.params(), optimizer))?;
    write_json(&sidecar_path(path), meta)
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    let mut tensors = decode(&read_bytes(path)?, path)?;
    let mut model = SiameseModel::<f32>::new(meta.model.clone())?;
    let take = |tensors: &mut TensorMap, name: &str, shape: &[usize]| -> AppResult<Vec<f32>> {
        let (s, d) = tensors
            .remove(name)
            .ok_or_else(|| AppError::format(path, format!("checkpoint lacks tensor {name}")))?;
        if s != shape {
            return Err(AppError::format(path, format!("{name}: shape {s:?}, model expects {shape:?}")));
        }
        Ok(d)
    };
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in &ids {
        let data = take(&mut tensors, name, shape)?;
        model.params_mut().set_value(*id, Tensor::new(shape, data)?)?;
    }
    let optimizer = match meta.optimizer {
        Some(cfg) if ids.iter().any(|(_, n, _)| tensors.contains_key(&format!("adam.m.{n}"))) => {
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for (_, name, shape) in &ids {
                m.push(take(&mut tensors, &format!("adam.m.{name}"), shape)?);
                v.push(take(&mut tensors, &format!("adam.v.{name}"), shape)?);
            }
            let mut opt = Adam::new(cfg, model.params());
            opt.restore(meta.optimizer_step, m, v)?;
            Some(opt)
        }
        _ => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(AppError::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, optimizer, meta })
}
