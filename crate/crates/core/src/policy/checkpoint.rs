use std::path::Path;

use serde::{Deserialize, Serialize};

use diffmath::{ParamStore, Real, Tensor};

use super::config::ModelConfig;
use super::model::PolicyModel;
use super::normalizer::EmaNormalizer;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HMCKPT\0\0";
pub const VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param/";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    obs_norm: EmaNormalizer,
    critic_norm: EmaNormalizer,
    value_norm: EmaNormalizer,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

/// Model parameters, normalizer statistics and any extra named tensors
/// (optimizer moments), with free-form metadata.
///
/// Layout: 8-byte magic, `u32` LE version, `u64` LE header length, JSON
/// header, then every tensor as `f64` LE in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub obs_norm: EmaNormalizer,
    pub critic_norm: EmaNormalizer,
    pub value_norm: EmaNormalizer,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &PolicyModel<T>) -> Self {
        let tensors = model
            .params
            .ids()
            .map(|id| {
                (
                    format!("{PARAM_PREFIX}{}", model.params.name(id)),
                    model.params.get(id).cast::<f64>(),
                )
            })
            .collect();
        Self {
            config: model.config().clone(),
            obs_norm: model.obs_norm.clone(),
            critic_norm: model.critic_norm.clone(),
            value_norm: model.value_norm.clone(),
            tensors,
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; fails unless `expected` (when given) equals the
    /// stored configuration.
    pub fn model<T: Real>(&self, expected: Option<&ModelConfig>) -> Result<PolicyModel<T>> {
        if let Some(e) = expected {
            if e != &self.config {
                return Err(Error::Checkpoint(format!(
                    "configuration mismatch: checkpoint has {}, run expects {}",
                    serde_json::to_string(&self.config)?,
                    serde_json::to_string(e)?
                )));
            }
        }
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                store.add(p, t.cast::<T>())?;
            }
        }
        let mut m = PolicyModel::from_params(self.config.clone(), store)?;
        if self.obs_norm.dim() != self.config.dims.obs_dim || self.critic_norm.dim() != self.config.dims.critic_dim
            || self.value_norm.dim() != 1
        {
            return Err(Error::Checkpoint("normalizer width does not match the configuration".into()));
        }
        m.obs_norm = self.obs_norm.clone();
        m.critic_norm = self.critic_norm.clone();
        m.value_norm = self.value_norm.clone();
        Ok(m)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let e = Entry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            obs_norm: self.obs_norm.clone(),
            critic_norm: self.critic_norm.clone(),
            value_norm: self.value_norm.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let raw = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::matrix(e.rows, e.cols, data)?));
        }
        Ok(Self {
            config: header.config,
            obs_norm: header.obs_norm,
            critic_norm: header.critic_norm,
            value_norm: header.value_norm,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}
