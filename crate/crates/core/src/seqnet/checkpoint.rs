use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetConfig, OptState, Tensor, Weights};
use crate::error::{Error, Result};
use crate::features::Scaler;
use crate::num::Real;
use crate::scene::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub opt: OptState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    dims: Vec<usize>,
    values: Vec<f64>,
}

// Field order is the on-disk order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    net_config: NetConfig,
    opt_state: OptState,
    vocab: Vocabulary,
    scaler: Scaler<f64>,
    tensors: BTreeMap<String, TensorRecord>,
}

impl<T: Real> Checkpoint<T> {
    /// Numbers are written in shortest round-trip form, so every tensor
    /// reloads to the same bits.
    pub fn to_json(&self) -> Result<String> {
        let p = &self.params;
        let tensors = p
            .weights
            .tensors()
            .iter()
            .map(|(name, t)| {
                (name.to_string(), TensorRecord { dims: t.dims.clone(), values: t.data.iter().map(|v| v.as_f64()).collect() })
            })
            .collect();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            net_config: p.config.clone(),
            opt_state: self.opt.clone(),
            vocab: p.vocab.clone(),
            scaler: p.scaler.cast(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Version(v as u32)),
            None => return Err(Error::Corrupt("missing version".into())),
        }
        let mut file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut weights = Weights::<T>::zeros(&file.net_config);
        for (name, t) in weights.tensors_mut() {
            let rec = file.tensors.remove(name).ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
            if rec.dims != t.dims || rec.values.len() != t.len() {
                return Err(Error::Corrupt(format!("tensor {name} has shape {:?}, expected {:?}", rec.dims, t.dims)));
            }
            *t = Tensor { dims: rec.dims, data: rec.values.into_iter().map(T::lit).collect() };
        }
        if let Some(extra) = file.tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
        }
        file.opt_state.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let params = ModelParams { config: file.net_config, weights, vocab: file.vocab, scaler: file.scaler.cast() };
        params.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        if !params.weights.all_finite() {
            return Err(Error::Corrupt("non-finite tensor value".into()));
        }
        Ok(Checkpoint { params, opt: file.opt_state })
    }
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, opt: &OptState, path: &Path) -> Result<()> {
    let ck = Checkpoint { params: params.clone(), opt: opt.clone() };
    std::fs::write(path, ck.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}
