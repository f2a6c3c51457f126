use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.tensors.push(Tensor { name, shape, data });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Total element count of tensors whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
            .map(|t| t.data.len())
            .sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched slots stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads {
            bufs: vec![Vec::new(); store.len()],
            lens: store.tensors.iter().map(|t| t.data.len()).collect(),
        }
    }

    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        let buf = &mut self.bufs[id.0];
        if buf.is_empty() {
            buf.resize(self.lens[id.0], 0.0);
        }
        buf
    }

    /// `None` when nothing was accumulated for `id`.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        let b = &self.bufs[id.0];
        (!b.is_empty()).then_some(b.as_slice())
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (i, src) in other.bufs.iter().enumerate() {
            if src.is_empty() {
                continue;
            }
            let dst = self.slot(ParamId(i));
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Gradient of `id` as a dense vector (zeros if untouched).
    pub fn dense(&self, id: ParamId) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; self.lens[id.0]], <[f64]>::to_vec)
    }
}

/// Which parameters an optimizer may update, and so which gradients to compute.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable(Vec<bool>);

impl Trainable {
    pub fn all(store: &ParamStore) -> Self {
        Trainable(vec![true; store.len()])
    }

    pub fn none(store: &ParamStore) -> Self {
        Trainable(vec![false; store.len()])
    }

    pub fn from_fn(store: &ParamStore, f: impl Fn(&str) -> bool) -> Self {
        Trainable(store.tensors().iter().map(|t| f(&t.name)).collect())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0[id.0]
    }

    pub fn any(&self, ids: &[ParamId]) -> bool {
        ids.iter().any(|&id| self.contains(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| ParamId(i))
    }

    pub fn count(&self, store: &ParamStore) -> usize {
        self.ids().map(|id| store.get(id).len()).sum()
    }
}
