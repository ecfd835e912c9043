use std::collections::{BTreeMap, HashMap};

use super::{Element, Tensor};
use crate::error::{bail, Result};

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    /// Receives gradients and optimizer updates.
    pub trainable: bool,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

/// Named subset of a store, e.g. every tensor of the online encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
}

/// Owns every learnable (and EMA-tracked) tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(
        &mut self,
        group: &str,
        name: &str,
        value: Tensor<T>,
        trainable: bool,
        decay: bool,
    ) -> Result<ParamId> {
        let full = format!("{group}.{name}");
        if self.by_name.contains_key(&full) {
            bail!(Config, "parameter `{full}` registered twice");
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: full.clone(), group: group.to_string(), value, trainable, decay });
        self.by_name.insert(full, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group(&self, name: &str) -> ParamGroup {
        ParamGroup {
            name: name.to_string(),
            ids: self.iter().filter(|(_, p)| p.group == name).map(|(id, _)| id).collect(),
        }
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for p in &self.params {
            if !names.contains(&p.group) {
                names.push(p.group.clone());
            }
        }
        names
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameter gradients collected after a backward pass, keyed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub(crate) grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += *g),
            None => {
                self.grads.insert(id, grad.to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("enc", "w", Tensor::zeros(&[2]), true, true).unwrap();
        assert!(store.register("enc", "w", Tensor::zeros(&[2]), true, true).is_err());
        assert!(store.register("dec", "w", Tensor::zeros(&[2]), true, true).is_ok());
        assert_eq!(store.group("enc").ids.len(), 1);
        assert_eq!(store.group_names(), vec!["enc".to_string(), "dec".to_string()]);
    }
}
