//! Named, ordered parameter storage shared by models, optimizers and checkpoints.

use std::collections::HashMap;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    /// Hierarchical name, e.g. `blocks.3.attn.qkv.weight`.
    pub name: String,
    /// Depth group for layer-wise learning-rate decay (0 = patch embedding).
    pub layer: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Parameters in registration order; the order is the checkpoint order.
#[derive(Clone)]
pub struct ParamSet<E> {
    infos: Vec<ParamInfo>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> std::fmt::Debug for ParamSet<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.iter().map(|(i, t)| (&i.name, t.shape())))
            .finish()
    }
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self {
            infos: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<E>,
        layer: usize,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.infos.push(ParamInfo { name, layer, decay });
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("ParamSet::set", cur.shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamInfo, &Tensor<E>)> {
        self.infos.iter().zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            infos: self.infos.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, all zeros (optimizer moments, gradient sums).
    pub fn zeros_like(&self) -> Vec<Tensor<E>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Whether every tensor is bit-identical to `other`'s.
    pub fn bit_eq(&self, other: &ParamSet<E>) -> bool {
        self.infos == other.infos
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Records every parameter on `tape`, as a leaf when `trainable` says so
    /// and as a constant otherwise.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape<E>,
        trainable: impl Fn(&ParamInfo) -> bool,
    ) -> Bound<'t, E> {
        let mut vars = Vec::with_capacity(self.len());
        let mut flags = Vec::with_capacity(self.len());
        for (info, t) in self.iter() {
            let train = trainable(info);
            vars.push(if train {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            });
            flags.push(train);
        }
        Bound {
            vars,
            trainable: flags,
        }
    }

    /// Binds everything as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<E>) -> Bound<'t, E> {
        self.bind(tape, |_| false)
    }
}

/// Parameters recorded on one tape, addressable by [`ParamId`].
pub struct Bound<'t, E: Element> {
    vars: Vec<Var<'t, E>>,
    trainable: Vec<bool>,
}

impl<'t, E: Element> Bound<'t, E> {
    pub fn var(&self, id: ParamId) -> Var<'t, E> {
        self.vars[id.0]
    }

    /// Per-parameter gradients; `None` for frozen parameters. Trainable
    /// parameters that received no gradient get zeros.
    pub fn grads(&self, grads: &Gradients<E>) -> Vec<Option<Tensor<E>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| t.then(|| grads.get_or_zeros(*v)))
            .collect()
    }
}

impl<'t, E: Element> Index<ParamId> for Bound<'t, E> {
    type Output = Var<'t, E>;

    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.register("a", Tensor::zeros([2]), 0, false).unwrap();
        assert!(p.register("a", Tensor::zeros([2]), 0, false).is_err());
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut p = ParamSet::<f64>::new();
        let a = p.register("a", Tensor::ones([2]), 0, true).unwrap();
        let b = p.register("b", Tensor::ones([2]), 1, true).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, |i| i.name != "a");
        let y = bound[a].mul(bound[b]).unwrap().sum();
        let g = bound.grads(&tape.backward(y).unwrap());
        assert!(g[a.index()].is_none());
        assert_eq!(g[b.index()].as_ref().unwrap().data(), &[1.0, 1.0]);
    }
}
