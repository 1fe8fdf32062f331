use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, Var};
use super::Arr;
use crate::{Error, Result};

/// Named parameter tensors for one network.
///
/// Entries marked non-trainable (batch-norm running statistics) are saved in
/// checkpoints and updated outside the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Arr,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.insert_with(name, value, true);
    }

    pub fn insert_with(&mut self, name: &str, value: Arr, trainable: bool) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter {name}"
        );
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn try_get(&self, name: &str) -> Result<&Arr> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Iterate entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Squared L2 norm of the difference between two stores (same keys).
    pub fn sq_distance(&self, other: &ParamStore) -> f64 {
        let mut acc = 0.0f64;
        for (name, e) in &self.entries {
            let o = other.get(name);
            for (a, b) in e.value.iter().zip(o.iter()) {
                let d = (*a - *b) as f64;
                acc += d * d;
            }
        }
        acc
    }
}

/// Per-step binding of parameters into a graph.
///
/// Caches the leaf `Var` for each parameter so a parameter used twice in one
/// forward pass accumulates a single gradient. Also collects batch-norm
/// statistic updates produced during the forward pass.
pub struct Bind<'a> {
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    pub bn_updates: Vec<(String, Arr, Arr)>,
}

impl<'a> Bind<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Attach a parameter as a differentiable leaf (cached per name).
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let entry = self
            .store
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = g.leaf(entry.value.clone(), entry.trainable);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Collect gradients for all attached trainable parameters.
    pub fn grads(&self, g: &mut Graph) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(grad) = g.take_grad(*var) {
                out.insert(name.clone(), grad);
            }
        }
        out
    }

    /// Apply collected batch-norm running statistic updates to `store`.
    pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, Arr, Arr)], momentum: f32) {
        for (prefix, mean, var) in updates {
            let rm = store.get_mut(&format!("{prefix}.running_mean"));
            *rm = &*rm * (1.0 - momentum) + mean * momentum;
            let rv = store.get_mut(&format!("{prefix}.running_var"));
            *rv = &*rv * (1.0 - momentum) + var * momentum;
        }
    }
}
