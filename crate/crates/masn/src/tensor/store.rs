//! Named parameter storage.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{MasnError, Result};

/// One trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Map from parameter path (e.g. `"appearance.graph.w1"`) to tensor and
/// gradient slot. Backed by a `BTreeMap` so enumeration order is the sorted
/// path order, deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(MasnError::DuplicateParam(path));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(path, ParamEntry { value, grad });
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|e| &e.value)
            .ok_or_else(|| MasnError::UnknownParam(path.to_string()))
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.value)
            .ok_or_else(|| MasnError::UnknownParam(path.to_string()))
    }

    pub fn grad(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|e| &e.grad)
            .ok_or_else(|| MasnError::UnknownParam(path.to_string()))
    }

    pub fn grad_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.grad)
            .ok_or_else(|| MasnError::UnknownParam(path.to_string()))
    }

    /// Accumulate `scale * delta` into the gradient slot for `path`.
    pub fn add_grad(&mut self, path: &str, delta: &Tensor, scale: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(path)
            .ok_or_else(|| MasnError::UnknownParam(path.to_string()))?;
        entry.grad.axpy(scale, delta)
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Parameter paths in deterministic (sorted) order.
    pub fn paths(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Global L2 norm of all gradient slots.
    pub fn grad_l2_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.squared_l2())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, scale: f64) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_sorted_and_unique() {
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::zeros(vec![2])).unwrap();
        store.insert("a.w", Tensor::zeros(vec![3])).unwrap();
        assert_eq!(store.paths(), vec!["a.w".to_string(), "b.w".to_string()]);
        assert!(matches!(
            store.insert("a.w", Tensor::zeros(vec![3])),
            Err(MasnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn grad_slot_matches_param_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(store.grad("w").unwrap().shape(), &[2, 3]);
        let delta = Tensor::filled(vec![2, 3], 1.0);
        store.add_grad("w", &delta, 0.5).unwrap();
        assert_eq!(store.grad("w").unwrap().data()[0], 0.5);
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().data()[0], 0.0);
    }
}
