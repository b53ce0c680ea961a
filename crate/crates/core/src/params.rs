//! Named parameter storage, trainability masks and parameter digests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, append-only list of named tensors. Ids are stable: parameters are
/// never removed, only appended or resized in place (router rows).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// SHA-256 over the exact bit patterns of one tensor.
    pub fn digest(&self, id: ParamId) -> String {
        digest_mat(&self.values[id.0])
    }

    /// Digest of every parameter keyed by name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.iter().map(|(_, n, v)| (n.to_string(), digest_mat(v))).collect()
    }

    /// Digest of the whole store (names, shapes and values).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.rows as u64).to_le_bytes());
            h.update((v.cols as u64).to_le_bytes());
            for x in &v.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn digest_mat(m: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((m.rows as u64).to_le_bytes());
    h.update((m.cols as u64).to_le_bytes());
    for x in &m.data {
        h.update(x.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Set of trainable parameters; everything else is frozen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamMask {
    trainable: BTreeSet<ParamId>,
}

impl ParamMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(store: &ParamStore) -> Self {
        ParamMask {
            trainable: store.ids().collect(),
        }
    }

    pub fn insert(&mut self, id: ParamId) {
        self.trainable.insert(id);
    }

    pub fn extend(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.trainable.extend(ids);
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.trainable.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.trainable.iter().copied()
    }

    /// Names of trainable parameters, sorted.
    pub fn names(&self, store: &ParamStore) -> Vec<String> {
        self.iter().map(|id| store.name(id).to_string()).collect()
    }
}
