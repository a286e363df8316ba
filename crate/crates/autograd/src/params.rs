use std::collections::BTreeMap;

use crate::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Registration order defines [`ParamId`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Per-parameter gradients; parameters that did not take part in a graph are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) {
        match self.grads.get_mut(&id) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(id, grad.clone());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Matrix> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`. Reduction order is the caller's responsibility.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }
}
