//! Named parameter storage with optimizer groups.
//!
//! Parameters live outside any tape. Each training step injects them as
//! tape leaves (or constants, for inference) and looks them up by name.
//! Entry order is insertion order everywhere, so updates, checkpoints and
//! hashes are deterministic.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};

/// Optimizer/freeze group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder + autoregressive summarizer: the representation path.
    Trunk,
    /// Graph machinery: sigma network, aggregation weights.
    Graph,
    /// Bilinear prediction matrices of the contrastive task.
    CpcHeads,
    DelayHead,
    ReplaceHead,
    DetectHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Trunk,
        ParamGroup::Graph,
        ParamGroup::CpcHeads,
        ParamGroup::DelayHead,
        ParamGroup::ReplaceHead,
        ParamGroup::DetectHead,
    ];
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f64>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let idx = self.index[name];
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let idx = self.index[name];
        &mut self.entries[idx].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Insert every parameter as a trainable tape leaf.
    pub fn inject(&self, tape: &mut Tape) -> VarMap {
        let mut map = HashMap::with_capacity(self.entries.len());
        for entry in &self.entries {
            map.insert(entry.name.clone(), tape.leaf(entry.value.clone()));
        }
        VarMap { map }
    }

    /// Insert every parameter as a constant (inference, no gradients).
    pub fn inject_frozen(&self, tape: &mut Tape) -> VarMap {
        let mut map = HashMap::with_capacity(self.entries.len());
        for entry in &self.entries {
            map.insert(entry.name.clone(), tape.constant(entry.value.clone()));
        }
        VarMap { map }
    }

    /// Replace a stored tensor, validating the shape.
    pub fn load_tensor(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let expected = self.entries[idx].value.shape().to_vec();
        if expected != value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor `{name}`: expected {:?}, got {:?}",
                expected,
                value.shape()
            )));
        }
        self.entries[idx].value = value;
        Ok(())
    }

    /// L2 norm of the difference against another store, per group.
    pub fn group_delta_l2(&self, other: &ParamStore, group: ParamGroup) -> f64 {
        let mut acc = 0.0;
        for entry in &self.entries {
            if entry.group != group {
                continue;
            }
            let other_val = other.get(&entry.name);
            acc += entry
                .value
                .iter()
                .zip(other_val.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        acc.sqrt()
    }

    /// True when any tensor holds a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.value.iter().any(|v| !v.is_finite()))
    }
}

/// Name-to-[`Var`] mapping for one tape.
pub struct VarMap {
    map: HashMap<String, Var>,
}

impl VarMap {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not injected"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn registration_preserves_order() {
        let mut store = ParamStore::new();
        store.register("b", ParamGroup::Trunk, ArrayD::zeros(vec![2]));
        store.register("a", ParamGroup::Graph, ArrayD::zeros(vec![3]));
        let names: Vec<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    fn load_tensor_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.register("w", ParamGroup::Trunk, ArrayD::zeros(vec![2, 3]));
        let err = store.load_tensor("w", ArrayD::zeros(vec![3, 2])).unwrap_err();
        assert!(err.to_string().contains("w"));
    }
}
