use std::collections::HashMap;
use std::sync::Arc;

use crate::{DiffError, Gradients, Graph, Real, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Values are shared with graphs by reference
/// count, so binding a parameter onto a tape copies nothing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(DiffError::InvalidShape {
                shape: value.shape().to_vec(),
                reason: format!("duplicate parameter {name}"),
            });
        }
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(self.values.len() - 1))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    /// Copy-on-write access; graphs still holding the old value keep it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// Per-graph map from parameters to tape nodes, so each parameter becomes
/// exactly one leaf however often it is used.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<ParamId, Var>,
    frozen: bool,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds parameters as constants: no gradients, no backward work.
    pub fn frozen() -> Self {
        Self {
            vars: HashMap::new(),
            frozen: true,
        }
    }

    pub fn var<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let v = if self.frozen {
            g.constant_arc(store.arc(id))?
        } else {
            g.variable_arc(store.arc(id))?
        };
        self.vars.insert(id, v);
        Ok(v)
    }

    pub fn lookup(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    /// Gradient per parameter, `None` where the parameter was unused or
    /// received nothing.
    pub fn collect<T: Real>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| self.vars.get(&id).and_then(|&v| grads.get(v).cloned()))
            .collect()
    }
}
