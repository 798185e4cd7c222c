//! Named parameter storage and checkpoint files.
//!
//! A checkpoint is a JSON manifest plus a sibling `.bin` file holding one
//! `SDT1` record per parameter, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn from N(0, std²); subject to weight decay.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.add(name, t, true)
    }

    /// Zero-initialized bias; exempt from weight decay.
    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]), false)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Writes `<path>` (JSON manifest) and `<path>.bin` (tensor records).
    pub fn save_checkpoint<E: Serialize>(&self, path: &Path, extra: &E) -> Result<()> {
        let bin = bin_path(path);
        write_tensors(&bin, &self.tensors)?;
        let manifest = Manifest {
            format: "sdcpc-checkpoint-v1".into(),
            tensors_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .zip(&self.decay)
                .map(|((n, t), &d)| ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    decay: d,
                })
                .collect(),
            extra: serde_json::to_value(extra)?,
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the store and the manifest's `extra` field.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        let bin = path.with_file_name(&manifest.tensors_file);
        let tensors = read_tensors(&bin)?;
        if tensors.len() != manifest.params.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} parameters but holds {} tensors",
                manifest.params.len(),
                tensors.len()
            )));
        }
        let mut store = ParamStore::new();
        for (e, t) in manifest.params.into_iter().zip(tensors) {
            if e.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            store.add(e.name, t, e.decay);
        }
        Ok((store, manifest.extra))
    }
}

fn bin_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors_file: String,
    params: Vec<ManifestEntry>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}
