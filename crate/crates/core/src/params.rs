//! Named parameter storage shared by every model topology.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.ids()
            .map(|id| ManifestEntry {
                name: self.names[id.0].clone(),
                shape: self.values[id.0].shape(),
                trainable: self.trainable[id.0],
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of the selected parameters.
    pub fn checksum_where(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for id in self.ids() {
            let name = &self.names[id.0];
            if !select(name) {
                continue;
            }
            let v = &self.values[id.0];
            hasher.update(name.as_bytes());
            hasher.update((v.rows() as u64).to_le_bytes());
            hasher.update((v.cols() as u64).to_le_bytes());
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex(&hasher.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn checksum_prefix(&self, prefix: &str) -> String {
        self.checksum_where(|n| n.starts_with(prefix))
    }

    /// Overwrites parameters of `self` with values from `src`. `src_name` maps a
    /// destination name to its source name, or `None` to leave it untouched.
    /// Missing or differently shaped sources are reported together.
    pub fn assign_from(&mut self, src: &ParamStore<T>, src_name: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut bad = Vec::new();
        let mut plan = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let Some(from) = src_name(name) else { continue };
            match src.id(&from) {
                Some(j) if src.value(j).shape() == self.values[i].shape() => plan.push((i, j)),
                Some(j) => bad.push(format!(
                    "{name} {:?} vs {from} {:?}",
                    self.values[i].shape(),
                    src.value(j).shape()
                )),
                None => bad.push(format!("{name} (no source {from})")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::IncompatibleArchitecture { names: bad });
        }
        for &(i, j) in &plan {
            self.values[i] = src.value(j).clone();
        }
        Ok(plan.len())
    }

    /// Loads values and trainable flags from a store with exactly the same layout.
    pub fn restore(&mut self, src: &ParamStore<T>) -> Result<()> {
        let extra: Vec<String> = src.names.iter().filter(|n| self.id(n).is_none()).cloned().collect();
        if !extra.is_empty() {
            return Err(Error::IncompatibleArchitecture { names: extra });
        }
        self.assign_from(src, |n| Some(n.to_string()))?;
        for i in 0..self.names.len() {
            let j = src.index[&self.names[i]];
            self.trainable[i] = src.trainable[j];
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Glorot-uniform weight of shape `fan_in x fan_out`.
pub fn glorot<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, limit)
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Mat<T> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Mat::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}
