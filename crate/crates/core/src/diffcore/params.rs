use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

/// A named set of tensors sharing optimizer settings.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub frozen: bool,
    tensors: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

/// All learnable state of a model, organised in parameter groups.
///
/// Tensor names are `group/name` and unique across the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(
        &mut self,
        name: &str,
        learning_rate: f64,
        weight_decay: f64,
    ) -> Result<usize, DiffError> {
        if self.groups.iter().any(|g| g.name == name) {
            return Err(DiffError::DuplicateName(name.to_string()));
        }
        if !(learning_rate > 0.0) || !(weight_decay >= 0.0) {
            return Err(DiffError::InvalidHyperparameter(format!(
                "group {name}: learning rate {learning_rate}, weight decay {weight_decay}"
            )));
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            learning_rate,
            weight_decay,
            frozen: false,
            tensors: Vec::new(),
        });
        Ok(self.groups.len() - 1)
    }

    pub fn add_tensor(
        &mut self,
        group: usize,
        name: &str,
        tensor: Tensor,
    ) -> Result<ParamId, DiffError> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| DiffError::UnknownParameter(format!("group #{group}")))?;
        if g.tensors.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateName(format!("{}/{}", g.name, name)));
        }
        g.tensors.push((name.to_string(), tensor));
        Ok(ParamId {
            group,
            index: g.tensors.len() - 1,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn group_at_mut(&mut self, idx: usize) -> &mut ParamGroup {
        &mut self.groups[idx]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.groups[id.group].tensors[id.index].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.groups[id.group].tensors[id.index].1
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.groups[id.group].frozen
    }

    pub fn full_name(&self, id: ParamId) -> String {
        let g = &self.groups[id.group];
        format!("{}/{}", g.name, g.tensors[id.index].0)
    }

    /// Looks up a tensor by its `group/name` path.
    pub fn id(&self, full_name: &str) -> Option<ParamId> {
        let (group, name) = full_name.split_once('/')?;
        let gi = self.groups.iter().position(|g| g.name == group)?;
        let ti = self.groups[gi].tensors.iter().position(|(n, _)| n == name)?;
        Some(ParamId {
            group: gi,
            index: ti,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.groups.iter().enumerate().flat_map(|(gi, g)| {
            (0..g.tensors.len()).map(move |ti| ParamId {
                group: gi,
                index: ti,
            })
        })
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParamGroup::param_count).sum()
    }

    /// Named copies of every tensor, in store order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.ids().map(|id| (self.full_name(id), self.get(id))).collect()
    }
}

/// Gradients keyed by parameter, iterated in store order.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.scale_mut(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}
