//! Named parameters, optimizer moments, and the JSON checkpoint format.
//!
//! Checkpoint layout (one JSON document):
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "metadata": { "config_hash": "...", "epoch": 3, ... },
//!   "params": { "<name>": { "shape": [rows, cols], "data": [..] }, ... },
//!   "optimizer": { "step": 120, "moments": { "<name>": { "m": [..], "v": [..] } } }
//! }
//! ```
//!
//! Maps are ordered by name so that save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pub(crate) step: u64,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Parameter gradients from a backward pass, zero-filled where a
    /// parameter did not influence the output.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut super::tape::Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, v)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }

    pub fn to_checkpoint(&self, metadata: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        let mut params = BTreeMap::new();
        let mut moments = BTreeMap::new();
        for p in &self.params {
            params.insert(
                p.name.clone(),
                StoredTensor {
                    shape: [p.value.rows(), p.value.cols()],
                    data: p.value.data().to_vec(),
                },
            );
            moments.insert(
                p.name.clone(),
                StoredMoments {
                    m: p.m.data().to_vec(),
                    v: p.v.data().to_vec(),
                },
            );
        }
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            metadata,
            params,
            optimizer: Some(StoredOptimizer {
                step: self.step,
                moments,
            }),
        }
    }

    /// Overwrites values (and optimizer state, when present) from a
    /// checkpoint with exactly the same parameter names and shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                ckpt.schema_version
            )));
        }
        if ckpt.params.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let stored = ckpt
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Schema(format!("missing parameter `{}`", p.name)))?;
            if stored.shape != [p.value.rows(), p.value.cols()] {
                return Err(Error::Schema(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_vec(stored.shape[0], stored.shape[1], stored.data.clone())?;
            let (r, c) = p.value.shape();
            match ckpt.optimizer.as_ref().and_then(|o| o.moments.get(&p.name)) {
                Some(mo) => {
                    p.m = Tensor::from_vec(r, c, mo.m.clone())?;
                    p.v = Tensor::from_vec(r, c, mo.v.clone())?;
                }
                None => {
                    p.m = Tensor::zeros(r, c);
                    p.v = Tensor::zeros(r, c);
                }
            }
        }
        self.step = ckpt.optimizer.as_ref().map_or(0, |o| o.step);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredOptimizer {
    pub step: u64,
    pub moments: BTreeMap<String, StoredMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<StoredOptimizer>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(|v| v.as_str())
    }
}
