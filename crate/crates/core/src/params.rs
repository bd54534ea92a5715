//! Named parameter storage shared by every network.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::Blob;
use crate::error::{bail, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are stored alongside weights but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let i = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Sets every trainable scalar to zero; buffers keep their values.
    pub fn zero_trainable(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.value.data_mut().fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Places every entry on the tape; trainable ones become tracked leaves when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if track && e.trainable {
                    tape.variable(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn export(&self, prefix: &str, out: &mut Vec<Blob>) {
        for e in &self.entries {
            out.push(Blob::from_tensor(
                &alloc::format!("{prefix}{}", e.name),
                &e.value,
            ));
        }
    }

    /// Overwrites every entry from blobs named `prefix + name`; shapes must match.
    pub fn import(&mut self, prefix: &str, blobs: &[Blob]) -> Result<()> {
        let by_name: BTreeMap<&str, &Blob> = blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        for e in &mut self.entries {
            let key = alloc::format!("{prefix}{}", e.name);
            let Some(blob) = by_name.get(key.as_str()) else {
                bail!(Checkpoint, "missing blob {}", key);
            };
            let t = blob.to_tensor::<T>()?;
            if t.shape() != e.value.shape() {
                bail!(
                    Checkpoint,
                    "blob {} has shape {}, expected {}",
                    key,
                    t.shape(),
                    e.value.shape()
                );
            }
            e.value = t;
        }
        Ok(())
    }
}

/// Tape handles for a [`Params`] set, in entry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-entry gradients aligned with the parameter list (`None` for buffers or untouched entries).
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Normal(0, std) tensor.
pub(crate) fn normal_tensor<T: Real, R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel())
        .map(|_| T::of(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
