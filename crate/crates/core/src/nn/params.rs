use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in a deterministic (sorted) order, each with a
/// trainable flag. Only trainable tensors are ever touched by updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.params.insert(name.into(), Param { tensor, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    pub fn unfreeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = true);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `(trainable, total)` element counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.values().fold((0, 0), |(tr, tot), p| {
            let n = p.tensor.numel();
            (tr + if p.trainable { n } else { 0 }, tot + n)
        })
    }

    /// Binds `name` on `g` as a leaf that requires grad iff trainable.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(g.param(name, &p.tensor, p.trainable))
    }

    /// Layout of all trainable tensors, for flattening gradients.
    pub fn trainable_layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, p) in &self.params {
            if p.trainable {
                entries.push(LayoutEntry {
                    name: name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    offset,
                });
                offset += p.tensor.numel();
            }
        }
        ParamLayout { entries, len: offset }
    }

    /// `p -= lr * update[p]` for every trainable `p`. Frozen tensors are
    /// never written.
    pub fn sgd_step(&mut self, layout: &ParamLayout, update: &[T], lr: T) -> Result<()> {
        if update.len() != layout.len {
            return Err(Error::shape(
                "sgd_step",
                format!("update of {} values for layout of {}", update.len(), layout.len),
            ));
        }
        for e in &layout.entries {
            let p = self
                .params
                .get_mut(&e.name)
                .ok_or_else(|| Error::MissingTensor(e.name.clone()))?;
            if !p.trainable {
                return Err(Error::invalid(format!("`{}` is frozen", e.name)));
            }
            let n = p.tensor.numel();
            for (w, &u) in p.tensor.data_mut().iter_mut().zip(&update[e.offset..e.offset + n]) {
                *w -= lr * u;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Flat concatenation order of a set of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    pub len: usize,
}

impl ParamLayout {
    /// Flattens gradients from a graph; missing entries are zeros.
    pub fn flatten<T: Scalar>(&self, g: &Graph<T>) -> Vec<T> {
        let mut flat = vec![T::zero(); self.len];
        let bound: BTreeMap<&str, Var> = g.bound_params().collect();
        for e in &self.entries {
            if let Some(grad) = bound.get(e.name.as_str()).and_then(|&v| g.grad(v)) {
                flat[e.offset..e.offset + grad.numel()].copy_from_slice(grad.data());
            }
        }
        flat
    }

    pub fn unflatten<T: Scalar>(&self, flat: &[T]) -> Result<BTreeMap<String, Tensor<T>>> {
        self.entries
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                Ok((
                    e.name.clone(),
                    Tensor::new(e.shape.clone(), flat[e.offset..e.offset + n].to_vec())?,
                ))
            })
            .collect()
    }
}
