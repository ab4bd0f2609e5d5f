//! Named parameter collections with gradient slots.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NumArray;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub value: NumArray,
    pub grad: NumArray,
    // Adam first/second moment buffers, allocated lazily on first adam step.
    pub m: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
}

/// Ordered (by name) map of trainable arrays. Every model in the crate is one
/// of these; task-vector arithmetic works on the flattened view.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    pub step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate entry {name}");
        let grad = NumArray::zeros(value.shape.clone());
        self.entries.insert(name, Entry { value, grad, m: None, v: None });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &NumArray {
        &self.entries.get(name).unwrap_or_else(|| panic!("no entry {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut NumArray {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("no entry {name}")).value
    }

    pub fn grad(&self, name: &str) -> &NumArray {
        &self.entries.get(name).unwrap_or_else(|| panic!("no entry {name}")).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut NumArray {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("no entry {name}")).grad
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Entry)> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Drop optimizer state (step count and Adam moments). Call before
    /// starting a new optimization on parameters copied from a trained model,
    /// otherwise stale momentum keeps moving entries whose gradients are
    /// zero.
    pub fn reset_optimizer_state(&mut self) {
        self.step_count = 0;
        for e in self.entries.values_mut() {
            e.m = None;
            e.v = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.data.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Concatenate all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in self.entries.values() {
            out.extend_from_slice(&e.value.data);
        }
        out
    }

    /// Write a flat vector (as produced by [`flatten`](Self::flatten)) back
    /// into the entries. Panics on length mismatch.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length mismatch");
        let mut offset = 0;
        for e in self.entries.values_mut() {
            let n = e.value.len();
            e.value.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Values equal in every entry, bit for bit.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        if self.len() != other.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(|((na, ea), (nb, eb))| {
            na == nb
                && ea.value.shape == eb.value.shape
                && ea.value
                    .data
                    .iter()
                    .zip(&eb.value.data)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("b", NumArray::vector(vec![1.0, 2.0, 3.0]));
        ps.insert("a", NumArray::new(vec![2, 2], vec![0.5, -0.5, 0.25, -0.25]));
        ps
    }

    #[test]
    fn flatten_orders_by_name() {
        let ps = demo_store();
        assert_eq!(ps.flatten(), vec![0.5, -0.5, 0.25, -0.25, 1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate entry")]
    fn duplicate_names_rejected() {
        let mut ps = demo_store();
        ps.insert("a", NumArray::vector(vec![0.0]));
    }

    proptest! {
        // Round-tripping through the flat view must preserve untouched
        // entries bit-exactly; task-vector edits rely on this.
        #[test]
        fn flatten_perturb_unflatten_preserves_untouched(idx in 0usize..7, delta in -1e3f64..1e3) {
            let mut ps = demo_store();
            let before = ps.flatten();
            let mut flat = before.clone();
            flat[idx] += delta;
            ps.unflatten(&flat);
            let after = ps.flatten();
            for i in 0..before.len() {
                if i != idx {
                    prop_assert_eq!(before[i].to_bits(), after[i].to_bits());
                }
            }
            prop_assert_eq!(after[idx].to_bits(), (before[idx] + delta).to_bits());
        }
    }
}
